import csv
import math

import pytest
from hypothesis import given, settings, strategies as st

from dpcap.planner import TrainPlan, effective_noise, epochs_vs_batch, eps_vs_dataset_size, tan_scale, write_csv


def test_effective_noise():
    assert effective_noise(TrainPlan(233_000_000, 1_300_000, 0.728, 5708)) == pytest.approx(5.6e-7, rel=1e-2)
    assert effective_noise(TrainPlan(10, 1, 1.0, 1)) == 1.0
    assert effective_noise(TrainPlan(233_000_000, 98_000, 0.474, 5708)) == pytest.approx(4.8367e-6, rel=1e-4)


def test_plan_fields():
    p = TrainPlan(1000, 100, 1.0, 50)
    assert p.q == 0.1 and p.epochs == 5.0 and p.resolved_delta == 1e-3
    with pytest.raises(ValueError):
        TrainPlan(10, 20, 1.0, 1)
    with pytest.raises(ValueError):
        TrainPlan(10, 0, 1.0, 1)


def test_tan_scale_examples():
    ref = TrainPlan(233_000_000, 1_300_000, 0.728, 5708)
    s = tan_scale(ref, 32).scaled
    assert s.B == 40625 and s.sigma == pytest.approx(0.02275) and s.steps == 5708
    s = tan_scale(TrainPlan(4096, 1024, 0.5, 10), 4).scaled
    assert (s.B, s.sigma) == (256, 0.125)
    assert tan_scale(ref, 1).scaled == ref


def test_tan_scale_rounds_batch_down():
    ref = TrainPlan(1000, 100, 1.0, 10)
    s = tan_scale(ref, 3).scaled
    assert s.B == 33
    assert s.sigma / s.B == pytest.approx(ref.sigma / ref.B, rel=1e-12)


def test_tan_scale_errors():
    with pytest.raises(ValueError):
        tan_scale(TrainPlan(100, 4, 1.0, 10), 8)
    with pytest.raises(ValueError):
        tan_scale(TrainPlan(100, 4, 1.0, 10), 0.5)


@settings(max_examples=200, deadline=None)
@given(B=st.integers(1, 10**7), sigma=st.floats(1e-3, 1e3), k=st.floats(1.0, 64.0), steps=st.integers(0, 10**5))
def test_tan_preserves_effective_noise(B, sigma, k, steps):
    if B / k < 1:
        return
    ref = TrainPlan(10**8, B, sigma, steps)
    scaled = tan_scale(ref, k).scaled
    assert math.isclose(effective_noise(scaled), effective_noise(ref), rel_tol=1e-12)
    assert scaled.steps == steps


def test_eps_vs_dataset_size_decreasing():
    Ns = [23.3e6 * 2**j for j in range(6)] + [233e6]
    rows = eps_vs_dataset_size(1.3e6, 0.728, 5708, Ns)
    eps = [e for _, e in rows]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    anchor = dict(rows)[233e6]
    assert anchor == pytest.approx(8.0, rel=0.05)
    assert dict(eps_vs_dataset_size(1.3e6, 0.728, 5708, [2 * 233e6]))[2 * 233e6] < 8


def test_eps_vs_dataset_size_fixed_delta_and_boundary():
    rows = eps_vs_dataset_size(100, 1.0, 50, [100, 200, 400, 800], delta_rule=1e-5)
    eps = [e for _, e in rows]
    assert rows[0][0] == 100 and eps[0] == max(eps)
    assert all(a > b for a, b in zip(eps, eps[1:]))


def test_eps_vs_dataset_size_skips_small_n():
    with pytest.warns(RuntimeWarning, match="skipping"):
        rows = eps_vs_dataset_size(100, 1.0, 10, [50, 1000])
    assert [n for n, _ in rows] == [1000]


def test_epochs_vs_batch():
    rows = epochs_vs_batch(8.0, 0.728, 233e6, [1.3e6])
    (B, steps, epochs), = rows
    assert abs(epochs - 32) <= 2


def test_epochs_vs_batch_large_batch_row():
    # eps grows like S^0.15 here, so the +-5% band on eps spans a wide step range;
    # the printed 5708 steps must fall inside it
    lo = epochs_vs_batch(8.0 * 0.95, 0.474, 233e6, [98e3])[0]
    hi = epochs_vs_batch(8.0 * 1.05, 0.474, 233e6, [98e3])[0]
    assert lo[1] <= 5708 <= hi[1]
    assert lo[2] <= 5708 * 98e3 / 233e6 <= hi[2]


def test_epochs_vs_batch_monotone_and_boundary():
    N = 10_000
    rows = epochs_vs_batch(4.0, 1.0, N, [10, 50, 100, 500, 1000, N])
    epochs = [e for _, _, e in rows]
    assert all(a >= b for a, b in zip(epochs, epochs[1:]))
    assert rows[-1][0] == N
    rows = epochs_vs_batch(1e-3, 0.5, N, [N])
    assert rows[0][1:] == (0, 0.0)


def test_write_csv_round_trips(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ("N", "epsilon"), [(1, 0.1), (2, 1 / 3)])
    with open(path, newline="") as f:
        rows = list(csv.reader(f, strict=True))
    assert rows[0] == ["N", "epsilon"]
    assert float(rows[2][1]) == 1 / 3
