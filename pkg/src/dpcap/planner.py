"""Privacy / utility / compute trade-off tables and TAN batch scaling."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

from .accountant import DEFAULT_ALPHAS, build_curve, solve_steps, to_epsilon


@dataclass(frozen=True)
class TrainPlan:
    N: int
    B: float
    sigma: float
    steps: int
    delta: float | None = None

    def __post_init__(self):
        if self.N <= 0 or self.B <= 0 or self.steps < 0:
            raise ValueError("N and B must be positive and steps nonnegative")
        if self.B > self.N:
            raise ValueError(f"batch size {self.B} exceeds dataset size {self.N}")

    @property
    def q(self) -> float:
        return self.B / self.N

    @property
    def epochs(self) -> float:
        return self.steps * self.B / self.N

    @property
    def resolved_delta(self) -> float:
        return 1.0 / self.N if self.delta is None else self.delta


@dataclass(frozen=True)
class TanScaledPlan:
    reference: TrainPlan
    k: float
    scaled: TrainPlan


def effective_noise(plan: TrainPlan) -> float:
    """Noise std on the averaged gradient per unit clip norm: sigma / B."""
    return plan.sigma / plan.B


def tan_scale(plan: TrainPlan, k: float) -> TanScaledPlan:
    """Shrink batch and noise by k at a fixed step count.

    A fractional B/k is rounded down and sigma recomputed from the rounded
    batch so that sigma/B stays exactly the reference value.
    """
    if k < 1:
        raise ValueError(f"scale factor must be >= 1, got {k}")
    b_scaled = math.floor(plan.B / k)
    if b_scaled < 1:
        raise ValueError(f"B/k = {plan.B / k} is below one example")
    sigma_scaled = plan.sigma / k if b_scaled * k == plan.B else plan.sigma * b_scaled / plan.B
    scaled = TrainPlan(plan.N, b_scaled, sigma_scaled, plan.steps, plan.delta)
    if not math.isclose(effective_noise(scaled), effective_noise(plan), rel_tol=1e-12):
        raise ArithmeticError("effective noise not preserved")
    return TanScaledPlan(plan, k, scaled)


def _delta_for(N: float, delta_rule) -> float:
    if delta_rule in (None, "1/N"):
        return 1.0 / N
    return float(delta_rule)


def eps_vs_dataset_size(B: float, sigma: float, steps: int, N_list: Sequence[float], delta_rule="1/N",
                        alphas=DEFAULT_ALPHAS, conversion: str = "improved") -> list[tuple[float, float]]:
    """(N, epsilon) at fixed (B, sigma, steps); delta is 1/N or a fixed value."""
    rows = []
    for N in sorted(N_list):
        if N < B:
            warnings.warn(f"skipping N={N} < B={B}", RuntimeWarning, stacklevel=2)
            continue
        curve = build_curve(sigma, B / N, alphas)
        rows.append((N, to_epsilon(curve, steps, _delta_for(N, delta_rule), conversion).epsilon))
    return rows


def epochs_vs_batch(target_eps: float, sigma: float, N: float, B_list: Sequence[float], delta=None,
                    alphas=DEFAULT_ALPHAS, conversion: str = "improved") -> list[tuple[float, int, float]]:
    """(B, steps, epochs) with steps the largest count staying within target_eps."""
    delta = 1.0 / N if delta is None else delta
    rows = []
    for B in sorted(B_list):
        if B > N:
            raise ValueError(f"batch size {B} exceeds dataset size {N}")
        sol = solve_steps(target_eps, B / N, sigma, delta, alphas=alphas, conversion=conversion)
        rows.append((B, sol.steps, sol.steps * B / N))
    return rows


def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
