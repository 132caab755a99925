"""Per-example gradient clipping without per-example gradients.

Two backward passes: the first records every layer's activations and output
gradients and turns them into per-example gradient norms; the second
backpropagates sum_i c_i * loss_i with c_i = min(1, C / ||grad_i||), which
yields the sum of clipped per-example gradients directly.

A dynamic loss scaler multiplies the loss before both passes. Examples whose
norm is non-finite get coefficient 0 and the scaler is then left untouched
for that step; an overflow in the second pass backs the scale off and the
step is recomputed, so every call returns an applied update. The same
happens when every example with a finite loss overflows in the first pass,
since then the scale rather than the data is at fault.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nncore import batch_size, subset, to_half_grid


@dataclass
class PerSampleNormReport:
    norms: np.ndarray  # NaN where the norm was not finite
    clip_coeffs: np.ndarray
    nan_count: int

    @property
    def flagged(self) -> np.ndarray:
        return np.isnan(self.norms)


class LossScaler:
    """Dynamic loss scale in the style of mixed-precision grad scalers."""

    def __init__(self, scale: float = 2.0**16, growth_factor: float = 2.0,
                 backoff_factor: float = 0.5, growth_interval: int = 2000):
        if not scale > 0 or not growth_factor > 1 or not 0 < backoff_factor < 1 or growth_interval < 1:
            raise ValueError("invalid loss scaler settings")
        self.scale = float(scale)
        self.growth_factor = growth_factor
        self.backoff_factor = backoff_factor
        self.growth_interval = growth_interval
        self.clean_steps = 0
        self.updates = 0

    def backoff(self) -> None:
        self.scale *= self.backoff_factor
        self.clean_steps = 0
        self.updates += 1

    def record_clean_step(self) -> None:
        self.clean_steps += 1
        if self.clean_steps >= self.growth_interval:
            self.scale *= self.growth_factor
            self.clean_steps = 0
            self.updates += 1

    def state(self) -> tuple[float, int, int]:
        return self.scale, self.clean_steps, self.updates


def ghost_norms(layers) -> np.ndarray:
    """Per-example L2 norm of the full gradient, from captured layer traces.

    Linear layers use the Gram identity ||G^T A||_F^2 = <A A^T, G G^T> when
    T^2 <= d_in * d_out, embeddings exploit one-hot inputs, and the remaining
    small layers (LayerNorm, positions) materialise their per-example grads.
    Non-finite results come back as NaN.
    """
    layers = list(layers)
    if not layers:
        raise ValueError("no trainable layers")
    with np.errstate(invalid="ignore", over="ignore"):
        sq = sum(layer.per_example_sq_norms() for layer in layers)
        norms = np.sqrt(sq)
    return np.where(np.isfinite(norms), norms, np.nan)


def clip_coefficients(norms, C: float) -> np.ndarray:
    """min(1, C / norm); 1 for a zero norm; 0 for a NaN (non-finite) norm."""
    if not C > 0:
        raise ValueError(f"clip norm must be > 0, got {C}")
    norms = np.asarray(norms, dtype=float)
    bad = ~np.isfinite(norms)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(norms > C, C / norms, 1.0)
    return np.where(bad, 0.0, c)


@dataclass
class ClippedGradient:
    grads: dict[str, np.ndarray]
    report: PerSampleNormReport
    losses: np.ndarray
    scale: float
    retries: int


class ScalerExhausted(RuntimeError):
    pass


def _first_pass(model, batch, scale):
    model.rt.accumulate = False
    with np.errstate(invalid="ignore", over="ignore"):
        losses = model.forward(batch)
        model.backward(np.full(len(losses), scale))
    norms = ghost_norms(model.layers()) / scale
    return losses, norms


def _second_pass(model, batch, coeffs, scale):
    store = model.store
    store.zero_grad()
    keep = np.flatnonzero(coeffs > 0)
    if len(keep) == 0:
        return store.grad_copy()
    if len(keep) < len(coeffs):
        # rerun without the zero-coefficient examples so their non-finite
        # activations cannot reach the shared gradient buffers
        model.rt.accumulate = False
        model.forward(subset(batch, keep))
    model.rt.accumulate = True
    model.backward(scale * coeffs[keep])
    if model.rt.half:
        # batch-summed scaled gradients live in half precision too; this is
        # where a too-large scale overflows first
        return {k: to_half_grid(g) / scale for k, g in store.grads.items()}
    return {k: g / scale for k, g in store.grads.items()}


def two_pass_clipped_backward(model, batch, C: float, scaler: LossScaler | None = None,
                              max_retries: int = 64) -> ClippedGradient:
    """Sum over the batch of per-example gradients clipped to norm C."""
    if batch_size(batch) == 0:
        raise ValueError("empty batch")
    scaler = scaler or LossScaler(scale=1.0)
    for attempt in range(max_retries + 1):
        scale = scaler.scale
        losses, norms = _first_pass(model, batch, scale)
        coeffs = clip_coefficients(norms, C)
        nan_count = int(np.sum(np.isnan(norms)))
        finite_loss = np.isfinite(losses)
        if finite_loss.any() and np.all(np.isnan(norms[finite_loss])):
            # losses do not depend on the scale; if no example with a finite
            # loss kept a finite norm, the scaled backward overflowed
            scaler.backoff()
            continue
        grads = _second_pass(model, batch, coeffs, scale)
        overflow = not all(np.all(np.isfinite(g)) for g in grads.values())
        if overflow:
            scaler.backoff()
            continue
        if nan_count == 0:
            scaler.record_clean_step()
        report = PerSampleNormReport(norms, coeffs, nan_count)
        return ClippedGradient(grads, report, losses, scale, attempt)
    raise ScalerExhausted(f"second backward still overflowing after {max_retries} backoffs")
