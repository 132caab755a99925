import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpcap.accountant import (
    DEFAULT_ALPHAS,
    MechanismParams,
    RdpCurve,
    build_curve,
    epsilon,
    rdp_gaussian,
    rdp_subsampled_gaussian,
    rdp_subsampled_gaussian_int,
    rdp_subsampled_gaussian_real,
    solve_sigma,
    solve_steps,
    to_epsilon,
)

Q_LAION = 1.3e6 / 233e6
DELTA_LAION = 1 / 233e6


def mp_closed_form(alpha, sigma, q, dps=50):
    """Binomial expansion of E_{N(0,s^2)}[((1-q) + q*exp((2z-1)/(2s^2)))^alpha] at high precision."""
    with mpmath.workdps(dps):
        s2 = 2 * mpmath.mpf(sigma) ** 2
        q = mpmath.mpf(q)
        total = mpmath.fsum(
            mpmath.binomial(alpha, k) * (1 - q) ** (alpha - k) * q**k * mpmath.exp(k * (k - 1) / s2)
            for k in range(alpha + 1)
        )
        return float(mpmath.log(total) / (alpha - 1))


@pytest.mark.parametrize("alpha", [2, 3, 5, 8, 16, 32, 64])
@pytest.mark.parametrize("sigma,q", [(0.5, 0.01), (0.728, Q_LAION), (1.0, 0.1), (2.0, 0.5), (5.0, 1e-4), (0.8, 0.9)])
def test_integer_closed_form_matches_high_precision(alpha, sigma, q):
    got = rdp_subsampled_gaussian_int(alpha, sigma, q)
    want = mp_closed_form(alpha, sigma, q)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-300)


def test_fractional_order_matches_monte_carlo():
    alpha, sigma, q = 2.5, 2.0, 0.2
    rng = np.random.default_rng(12345)
    n, chunks = 10**7, 10
    vals = []
    for _ in range(chunks):
        z = rng.normal(0.0, sigma, n // chunks)
        vals.append(((1 - q) + q * np.exp((2 * z - 1) / (2 * sigma**2))) ** alpha)
    vals = np.concatenate(vals)
    mean, se = vals.mean(), vals.std(ddof=1) / math.sqrt(len(vals))
    A = math.exp((alpha - 1) * rdp_subsampled_gaussian_real(alpha, sigma, q))
    assert abs(A - mean) < 3 * se


@pytest.mark.parametrize("alpha", [2, 3, 7, 20, 64, 128])
@pytest.mark.parametrize("sigma", [0.3, 1.0, 4.0])
def test_full_sampling_reduces_to_gaussian(alpha, sigma):
    assert rdp_subsampled_gaussian_int(alpha, sigma, 1.0) == pytest.approx(alpha / (2 * sigma**2), rel=1e-9)


@pytest.mark.parametrize("alpha", [1.5, 2.75, 10.0, 40.0])
def test_gaussian_rdp(alpha):
    assert rdp_gaussian(alpha, 2.0) == pytest.approx(alpha / 8)


@settings(max_examples=60, deadline=None)
@given(
    alpha=st.integers(2, 64),
    sigma=st.floats(0.4, 10.0),
    log_q=st.floats(-6.0, 0.0),
)
def test_quadrature_agrees_with_closed_form(alpha, sigma, log_q):
    q = 10.0**log_q
    exact = rdp_subsampled_gaussian_int(alpha, sigma, q)
    quad = rdp_subsampled_gaussian_real(float(alpha), sigma, q)
    assert quad == pytest.approx(exact, rel=1e-6, abs=1e-300)


def test_zero_sampling_gives_zero_curve():
    curve = build_curve(1.0, 0.0, DEFAULT_ALPHAS[:20])
    assert all(e == 0 for e in curve.eps_rdp)


def test_dispatch_and_order_checks():
    assert rdp_subsampled_gaussian(4.0, 1.0, 0.1) == rdp_subsampled_gaussian_int(4, 1.0, 0.1)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2.0, 1.0, 1.5)


def test_rdp_conversion_formula():
    curve = build_curve(1.0, 0.01, [2, 4, 8, 16, 32])
    S, delta = 1000, 1e-5
    want = min(S * e + math.log(1 / delta) / (a - 1) for a, e in curve.points)
    assert to_epsilon(curve, S, delta, "rdp").epsilon == pytest.approx(want, rel=1e-12)


def test_improved_conversion_is_tighter():
    curve = build_curve(0.728, Q_LAION)
    loose = to_epsilon(curve, 5708, DELTA_LAION, "rdp").epsilon
    tight = to_epsilon(curve, 5708, DELTA_LAION, "improved").epsilon
    assert tight < loose


def test_zero_steps_uses_largest_order():
    curve = build_curve(1.0, 0.01, [2, 4, 8, 16])
    spec = to_epsilon(curve, 0, 1e-5, "rdp")
    assert spec.alpha == 16
    assert spec.epsilon == pytest.approx(math.log(1e5) / 15)


def test_composition_is_linear():
    curve = build_curve(0.9, 0.02)
    for S in (1, 17, 1000):
        a = to_epsilon(curve, S, 1e-6)
        b = to_epsilon(curve.scaled(S), 1, 1e-6)
        assert a.epsilon == pytest.approx(b.epsilon, rel=1e-12)
        assert a.alpha == b.alpha


@settings(max_examples=25, deadline=None)
@given(
    sigma=st.floats(0.5, 3.0),
    log_q=st.floats(-4.0, -0.5),
    steps=st.integers(1, 5000),
    factor=st.floats(1.05, 2.0),
)
def test_epsilon_monotone(sigma, log_q, steps, factor):
    q = 10.0**log_q
    delta = 1e-6

    def eps(s, qq, S):
        return epsilon(MechanismParams(s, qq, S, delta)).epsilon

    base = eps(sigma, q, steps)
    assert eps(sigma * factor, q, steps) <= base + 1e-12
    assert eps(sigma, q, int(steps * factor) + 1) >= base - 1e-12
    assert eps(sigma, min(1.0, q * factor), steps) >= base - 1e-12


@pytest.mark.parametrize("target,q,S,delta", [(8.0, Q_LAION, 5708, DELTA_LAION), (1.0, 0.01, 1000, 1e-5), (3.0, 0.1, 50, 1e-4)])
def test_solve_sigma_round_trip(target, q, S, delta):
    sigma = solve_sigma(target, q, S, delta)
    eps = to_epsilon(build_curve(sigma, q), S, delta).epsilon
    assert target * (1 - 5e-3) <= eps <= target


def test_solve_sigma_unreachable():
    with pytest.raises(ValueError):
        solve_sigma(1e-6, 1.0, 10**6, 1e-10, sigma_max=2.0)
    with pytest.raises(ValueError):
        solve_sigma(0.0, 0.1, 10, 1e-5)


def test_solve_steps_is_largest_feasible():
    q, sigma, delta, target = 0.01, 1.0, 1e-5, 2.0
    sol = solve_steps(target, q, sigma, delta)
    curve = build_curve(sigma, q)
    assert not sol.capped
    assert to_epsilon(curve, sol.steps, delta).epsilon <= target
    assert to_epsilon(curve, sol.steps + 1, delta).epsilon > target


def test_solve_steps_cap_and_zero():
    sol = solve_steps(1e6, 1e-3, 5.0, 1e-5, max_steps=1000)
    assert sol.steps == 1000 and sol.capped
    assert solve_steps(1e-4, 0.5, 0.5, 1e-5).steps == 0


def test_failing_orders_are_dropped_with_warning(monkeypatch):
    import dpcap.accountant as acc

    real = acc.rdp_subsampled_gaussian

    def flaky(a, s, q):
        if a == 3:
            raise OverflowError("forced")
        return real(a, s, q)

    monkeypatch.setattr(acc, "rdp_subsampled_gaussian", flaky)
    with pytest.warns(RuntimeWarning, match="alpha=3"):
        curve = acc.build_curve(1.0, 0.1, [2, 3, 4])
    assert curve.alphas == (2.0, 4.0)


def test_curve_validation():
    with pytest.raises(ValueError):
        RdpCurve((2.0, 1.5), (0.1, 0.1))
    with pytest.raises(ValueError):
        RdpCurve((2.0,), (float("nan"),))
    with pytest.raises(ValueError):
        MechanismParams(1.0, 0.0, 10, 1e-5)


def test_huge_noise_limit():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert epsilon(MechanismParams(1e9, Q_LAION, 5708, DELTA_LAION)).epsilon < 1e-3
