"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

The per-step quantity is

    g_alpha(sigma, q) = D_alpha((1 - q) N(0, sigma^2) + q N(1, sigma^2) || N(0, sigma^2))

evaluated by a binomial closed form for integer orders and by adaptive
quadrature for fractional orders. RDP composes additively over steps and is
converted to (epsilon, delta)-DP by minimising over the order grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, special
from scipy.optimize import minimize_scalar

DEFAULT_ALPHAS: tuple[float, ...] = (
    tuple(1.0 + 0.25 * i for i in range(1, 17))
    + tuple(float(a) for a in range(6, 65))
    + tuple(float(2**j) for j in range(7, 17))
)

CONVERSIONS = ("improved", "rdp")


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


@dataclass(frozen=True)
class MechanismParams:
    sigma: float
    q: float
    steps: int
    delta: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.q <= 1:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RdpCurve:
    """Per-step RDP values on a grid of orders."""

    alphas: tuple[float, ...]
    eps_rdp: tuple[float, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.alphas) != len(self.eps_rdp):
            raise ValueError("alphas and eps_rdp differ in length")
        if not self.alphas:
            raise ValueError("empty RDP curve")
        a = np.asarray(self.alphas, dtype=float)
        if np.any(a <= 1) or np.any(np.diff(a) <= 0):
            raise ValueError("orders must be > 1 and strictly increasing")
        e = np.asarray(self.eps_rdp, dtype=float)
        if not np.all(np.isfinite(e)) or np.any(e < 0):
            raise ValueError("RDP values must be finite and nonnegative")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.alphas, self.eps_rdp))

    def scaled(self, k: float) -> "RdpCurve":
        """Curve of k-fold composition."""
        return RdpCurve(self.alphas, tuple(k * e for e in self.eps_rdp), self.warnings)


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    alpha: float | None = None
    conversion: str = "improved"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


def _check_order(alpha: float) -> None:
    if not alpha > 1:
        raise ValueError(f"Renyi order must be > 1, got {alpha}")


def _check_mechanism(sigma: float, q: float) -> None:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not 0 <= q <= 1:
        raise ValueError(f"q must lie in [0, 1], got {q}")


def rdp_gaussian(alpha: float, sigma: float) -> float:
    """RDP of the (unsubsampled) Gaussian mechanism with sensitivity 1."""
    _check_order(alpha)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return alpha / (2.0 * sigma**2)


def _log_expm1(x):
    """log(exp(x) - 1) for x > 0, stable at both ends."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(x > 30.0, x + np.log1p(-np.exp(-x)), np.log(np.expm1(np.minimum(x, 30.0))))


def rdp_subsampled_gaussian_int(alpha: int, sigma: float, q: float) -> float:
    """Closed-form g_alpha for integer alpha >= 2.

    Uses A_alpha - 1 = sum_{k>=2} C(alpha, k) (1-q)^(alpha-k) q^k (e^{k(k-1)/(2 sigma^2)} - 1),
    which keeps full relative precision when q is tiny, and works in log space
    so large orders do not overflow.
    """
    if int(alpha) != alpha or alpha < 2:
        raise ValueError(f"integer order >= 2 required, got {alpha}")
    _check_mechanism(sigma, q)
    alpha = int(alpha)
    if q == 0:
        return 0.0
    k = np.arange(2, alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log1mq = math.log1p(-q) if q < 1 else -np.inf
        log_terms = log_binom + k * math.log(q) + (alpha - k) * log1mq
        # 0 * -inf is nan for k == alpha when q == 1
        log_terms = np.where(k == alpha, log_binom + alpha * math.log(q), log_terms)
    log_terms = log_terms + _log_expm1(k * (k - 1) / (2.0 * sigma**2))
    log_a_minus_1 = special.logsumexp(log_terms)
    value = float(np.logaddexp(0.0, log_a_minus_1)) / (alpha - 1)
    if not math.isfinite(value):
        raise OverflowError(f"RDP overflow at alpha={alpha}, sigma={sigma}; sigma too small for this order")
    return value


def _h(u: float, alpha: float) -> float:
    """(1+u)^alpha - 1 - alpha*u, accurate for small |u| (binomial series there)."""
    if abs(u) >= 1e-3:
        return math.expm1(alpha * math.log1p(u)) - alpha * u
    out, coef, power = 0.0, alpha, u
    for j in range(2, 10):
        coef *= (alpha - j + 1) / j
        power *= u
        out += coef * power
    return out


def _quad(f, lo, hi, points, epsabs, epsrel, limit):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, lo, hi, points=points, epsabs=epsabs, epsrel=epsrel, limit=limit)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(str(exc)) from exc
    return val, err


def rdp_subsampled_gaussian_real(
    alpha: float,
    sigma: float,
    q: float,
    *,
    epsabs: float = 1e-14,
    epsrel: float = 1e-8,
    limit: int = 200,
) -> float:
    """g_alpha for real alpha > 1 by adaptive Gauss-Kronrod quadrature.

    The divergence equals log(E_{x~N(0,sigma^2)}[(1 + u(x))^alpha]) / (alpha - 1)
    with u(x) = q (exp((2x - 1) / (2 sigma^2)) - 1). When the expectation is
    large it is integrated in scaled log form around the integrand's mode;
    otherwise E[(1+u)^alpha] - 1 is integrated directly (E[u] = 0 lets the
    linear term be dropped, which avoids cancellation for tiny q).
    """
    _check_order(alpha)
    _check_mechanism(sigma, q)
    if q == 0:
        return 0.0
    s2 = sigma * sigma
    log1mq = math.log1p(-q) if q < 1 else -np.inf
    logq = math.log(q)
    log_norm = -0.5 * math.log(2 * math.pi * s2)

    def log_f(x):
        z = (2 * x - 1) / (2 * s2)
        return alpha * float(np.logaddexp(log1mq, logq + z)) - x * x / (2 * s2) + log_norm

    # locate the mode of log_f (unimodal in practice; bounded search is robust)
    hi_guess = max(1.0, alpha) + 40 * sigma
    res = minimize_scalar(lambda x: -log_f(x), bounds=(-40 * sigma, hi_guess), method="bounded",
                          options={"xatol": 1e-10 * max(1.0, sigma)})
    mode = float(res.x)
    fmax = float(log_f(mode))
    # the bounded search can miss the mode when it sits near 0; compare with 0
    if log_f(0.0) > fmax:
        mode, fmax = 0.0, float(log_f(0.0))

    def edge(direction):
        step = sigma
        x = mode
        while log_f(x + direction * step) - fmax > -60:
            step *= 2
            if step > 1e6 * max(sigma, 1.0):
                raise QuadratureError("integrand tail does not decay")
        return mode + direction * step

    lo, hi = edge(-1), edge(1)
    lo, hi = min(lo, -14 * sigma), max(hi, 14 * sigma, alpha + 14 * sigma)
    # for tiny q the mass of f - 1 sits in a second bump near x = alpha that
    # is invisible next to the Gaussian peak; split the range at every local
    # maximum of the integrand so the adaptive rule cannot step over it
    grid = np.linspace(lo, hi, 4001)
    zg = (2 * grid - 1) / (2 * s2)
    with np.errstate(divide="ignore", over="ignore"):
        lg = alpha * np.logaddexp(log1mq, logq + zg) - grid * grid / (2 * s2)
        lg_minus = np.log(np.abs(alpha * np.log1p(q * np.expm1(zg))) + 1e-300) - grid * grid / (2 * s2)
    peaks = set()
    for curve in (lg, lg_minus):
        inner = np.flatnonzero((curve[1:-1] > curve[:-2]) & (curve[1:-1] >= curve[2:])) + 1
        inner = inner[curve[inner] > curve.max() - 80]
        peaks.update(float(grid[i]) for i in inner[:8])
    pts = []
    for p in sorted({p for p in (mode, 0.5, 0.0, float(alpha), *peaks) if lo < p < hi}):
        if not pts or p - pts[-1] > 1e-2 * sigma:
            pts.append(p)

    scaled, _ = _quad(lambda x: math.exp(log_f(x) - fmax), lo, hi, pts, epsabs, epsrel, limit)
    log_j = fmax + math.log(scaled)
    if log_j > 0.1:
        value = log_j / (alpha - 1)
    else:
        def h(x):
            u = q * math.expm1((2 * x - 1) / (2 * s2))
            lw = -x * x / (2 * s2) + log_norm
            if abs(u) < 1e-3:
                return _h(u, alpha) * math.exp(lw)
            # weight folded into the exponent so large u cannot overflow
            return math.exp(alpha * math.log1p(u) + lw) - (1 + alpha * u) * math.exp(lw)

        i_val, _ = _quad(h, lo, hi, pts, 0.0, epsrel, limit)
        if not i_val >= 0:
            i_val = max(i_val, 0.0)
        value = math.log1p(i_val) / (alpha - 1)
    if not math.isfinite(value):
        raise QuadratureError(f"non-finite divergence at alpha={alpha}, sigma={sigma}, q={q}")
    return value


def rdp_subsampled_gaussian(alpha: float, sigma: float, q: float) -> float:
    if float(alpha).is_integer() and alpha >= 2:
        return rdp_subsampled_gaussian_int(int(alpha), sigma, q)
    return rdp_subsampled_gaussian_real(alpha, sigma, q)


def build_curve(sigma: float, q: float, alphas: Sequence[float] = DEFAULT_ALPHAS) -> RdpCurve:
    """Evaluate g_alpha on each order; failing orders are dropped with a warning."""
    _check_mechanism(sigma, q)
    if len(alphas) == 0:
        raise ValueError("empty order grid")
    kept_a, kept_e, notes = [], [], []
    for a in sorted(set(float(x) for x in alphas)):
        try:
            e = rdp_subsampled_gaussian(a, sigma, q)
        except (OverflowError, QuadratureError) as exc:
            notes.append(f"alpha={a:g} omitted: {exc}")
            continue
        kept_a.append(a)
        kept_e.append(max(e, 0.0))
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)
    if not kept_a:
        raise ValueError(f"RDP evaluation failed at every order (sigma={sigma}, q={q})")
    return RdpCurve(tuple(kept_a), tuple(kept_e), tuple(notes))


def _eps_per_order(curve: RdpCurve, steps: float, delta: float, conversion: str) -> np.ndarray:
    a = np.asarray(curve.alphas)
    total = steps * np.asarray(curve.eps_rdp)
    if conversion == "rdp":
        return total + math.log(1 / delta) / (a - 1)
    if conversion == "improved":
        # Balle et al. (2020), Thm. 21; this is what Opacus reports
        return total + np.log1p(-1 / a) - (math.log(delta) + np.log(a)) / (a - 1)
    raise ValueError(f"conversion must be one of {CONVERSIONS}, got {conversion!r}")


def to_epsilon(curve: RdpCurve, steps: int, delta: float, conversion: str = "improved") -> PrivacySpec:
    """Compose `steps` times and convert to (epsilon, delta)-DP.

    conversion="rdp" is the classical eps = S*g + log(1/delta)/(alpha-1);
    "improved" subtracts log(alpha)/(alpha-1) - log((alpha-1)/alpha) from it.
    """
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    eps = _eps_per_order(curve, steps, delta, conversion)
    i = int(np.argmin(eps))
    return PrivacySpec(max(float(eps[i]), 0.0), delta, curve.alphas[i], conversion)


def epsilon(params: MechanismParams, alphas: Sequence[float] = DEFAULT_ALPHAS,
            conversion: str = "improved") -> PrivacySpec:
    return to_epsilon(build_curve(params.sigma, params.q, alphas), params.steps, params.delta, conversion)


def solve_sigma(
    target_eps: float,
    q: float,
    steps: int,
    delta: float,
    *,
    sigma_min: float = 0.1,
    sigma_max: float = 1e3,
    rtol: float = 1e-3,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    conversion: str = "improved",
) -> float:
    """Smallest sigma in [sigma_min, sigma_max] reaching target_eps, by bisection."""
    if not target_eps > 0:
        raise ValueError(f"target epsilon must be > 0, got {target_eps}")

    def eps_at(s):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return to_epsilon(build_curve(s, q, alphas), steps, delta, conversion).epsilon

    if eps_at(sigma_max) > target_eps:
        raise ValueError(f"target epsilon {target_eps} unreachable even at sigma={sigma_max}")
    lo, hi = sigma_min, sigma_max
    if eps_at(lo) <= target_eps:
        return lo
    # bisection in log sigma; eps is decreasing in sigma
    while hi / lo - 1 > rtol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


class StepSolution(NamedTuple):
    steps: int
    capped: bool


def solve_steps(
    target_eps: float,
    q: float,
    sigma: float,
    delta: float,
    *,
    max_steps: int = 10**8,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    conversion: str = "improved",
) -> StepSolution:
    """Largest S with eps(S) <= target_eps (doubling, then binary search)."""
    curve = build_curve(sigma, q, alphas)

    def ok(s):
        return to_epsilon(curve, s, delta, conversion).epsilon <= target_eps

    if not ok(1):
        return StepSolution(0, False)
    if ok(max_steps):
        return StepSolution(max_steps, True)
    lo, hi = 1, 2
    while ok(hi):
        lo, hi = hi, min(2 * hi, max_steps)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return StepSolution(lo, False)
