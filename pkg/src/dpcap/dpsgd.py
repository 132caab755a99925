"""DP-SGD: Poisson sampling, clipped aggregation, Gaussian noise, AdamW.

One step computes

    g_k = (1/B) * (sum_{i in batch} clip_C(grad loss_i) + N(0, C^2 sigma^2 I))

where B is the *expected* batch size q*N, and feeds g_k to AdamW. Sampling
and noise come from separate counter-based Philox streams keyed by
(seed, purpose, step), so any step can be replayed on its own.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ghostnorm import LossScaler, PerSampleNormReport, two_pass_clipped_backward
from .nncore import ParamStore, subset

_STREAMS = {"sample": 1, "noise": 2}


@dataclass
class DpSgdConfig:
    sigma: float
    B: int
    N: int
    C: float = 1.0
    lr: float = 5.12e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.4
    decay_horizon_mult: float = 2.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    seed: int = 0
    private: bool = True

    def __post_init__(self):
        if self.N < 1 or self.B < 1:
            raise ValueError("N and B must be positive")
        if not 0 < self.q <= 1:
            raise ValueError(f"q = B/N must lie in (0, 1], got {self.q}")
        if self.private and not self.C > 0:
            raise ValueError("clip norm C must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def q(self) -> float:
        return self.B / self.N

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def stream(seed: int, purpose: str, step: int) -> np.random.Generator:
    """Philox generator keyed by (seed, purpose, step)."""
    key = np.random.SeedSequence([seed, _STREAMS[purpose], step]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def box_muller(gen: np.random.Generator, n: int) -> np.ndarray:
    """n standard normals from 2*ceil(n/2) uniforms."""
    m = (n + 1) // 2
    u1 = 1.0 - gen.random(m)  # (0, 1]
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
    return z[:n]


def poisson_sample(N: int, q: float, seed: int, step: int) -> np.ndarray:
    """Indices included independently with probability q; may be empty."""
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    if q == 1:
        return np.arange(N)
    return np.flatnonzero(stream(seed, "sample", step).random(N) < q)


@dataclass
class NoisyGradient:
    values: dict[str, np.ndarray]
    indices: np.ndarray
    step: int


def draw_noise(shapes: dict[str, tuple], gen: np.random.Generator) -> dict[str, np.ndarray]:
    """Standard normal draw per parameter, in sorted name order."""
    names = sorted(shapes)
    sizes = [int(np.prod(shapes[n])) for n in names]
    z = box_muller(gen, sum(sizes))
    out, pos = {}, 0
    for n, s in zip(names, sizes):
        out[n] = z[pos : pos + s].reshape(shapes[n])
        pos += s
    return out


def privatize(clipped_sum: dict[str, np.ndarray], C: float, sigma: float, B: int,
              noise_rng: np.random.Generator, indices=None, step: int = 0) -> NoisyGradient:
    """(1/B) * (clipped_sum + z), z ~ N(0, C^2 sigma^2 I); B is the expected batch size."""
    z = draw_noise({k: v.shape for k, v in clipped_sum.items()}, noise_rng)
    values = {k: (v + (C * sigma) * z[k]) / B for k, v in clipped_sum.items()}
    return NoisyGradient(values, np.asarray([] if indices is None else indices, dtype=int), step)


def schedule(step: int, total_steps: int, config: DpSgdConfig) -> float:
    """Linear warmup over warmup_frac*total, then linear decay reaching 0 at
    decay_horizon_mult*total steps past the end of warmup."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = config.warmup_frac * total_steps
    if step < warmup:
        return config.lr * step / warmup
    horizon = config.decay_horizon_mult * total_steps
    return max(0.0, config.lr * (1.0 - (step - warmup) / horizon))


class AdamW:
    """Adam with decoupled weight decay: p <- p (1 - lr wd) - lr mhat / (sqrt(vhat) + eps)."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.store.values.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adamw_step(optimizer: AdamW, noisy_grad: NoisyGradient | dict, step: int, total_steps: int,
               config: DpSgdConfig) -> float:
    """Apply one AdamW update at the scheduled learning rate; returns that rate."""
    lr = schedule(step, total_steps, config)
    grads = noisy_grad.values if isinstance(noisy_grad, NoisyGradient) else noisy_grad
    optimizer.step(grads, lr)
    return lr


@dataclass
class StepResult:
    step: int
    lr: float
    batch_size: int
    mean_loss: float
    report: PerSampleNormReport | None = None
    noisy_grad: NoisyGradient | None = field(default=None, repr=False)


class DpSgdTrainer:
    """Runs DP-SGD steps of ``model`` over ``data`` (anything with ``subset``)."""

    def __init__(self, model, data, config: DpSgdConfig, total_steps: int, scaler: LossScaler | None = None):
        self.model = model
        self.data = data
        self.config = config
        self.total_steps = total_steps
        self.scaler = scaler or LossScaler()
        self.optimizer = AdamW(model.store, config.betas, config.eps, config.weight_decay)
        self.step_index = 0

    def compute_gradient(self, step: int):
        cfg = self.config
        idx = poisson_sample(cfg.N, cfg.q, cfg.seed, step)
        report, mean_loss = None, float("nan")
        store = self.model.store
        if not cfg.private:
            store.zero_grad()
            if len(idx):
                self.model.rt.accumulate = True
                losses = self.model.forward(subset(self.data, idx))
                self.model.backward(np.full(len(idx), 1.0 / len(idx)))
                mean_loss = float(np.mean(losses))
            return NoisyGradient(store.grad_copy(), idx, step), report, mean_loss
        if len(idx):
            clipped = two_pass_clipped_backward(self.model, subset(self.data, idx), cfg.C, self.scaler)
            grads, report = clipped.grads, clipped.report
            finite = clipped.losses[np.isfinite(clipped.losses)]
            mean_loss = float(np.mean(finite)) if len(finite) else float("nan")
        else:
            # noise-only step keeps the accounting model intact
            grads = {k: np.zeros_like(v) for k, v in store.values.items()}
        noisy = privatize(grads, cfg.C, cfg.sigma, cfg.B, stream(cfg.seed, "noise", step), idx, step)
        return noisy, report, mean_loss

    def step(self) -> StepResult:
        k = self.step_index
        noisy, report, mean_loss = self.compute_gradient(k)
        lr = adamw_step(self.optimizer, noisy, k, self.total_steps, self.config)
        self.step_index += 1
        return StepResult(k, lr, len(noisy.indices), mean_loss, report, noisy)


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
