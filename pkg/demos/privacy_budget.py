"""
How much privacy does a large-batch DP-SGD run spend?
=====================================================

We account for DP-SGD with Poisson subsampling on a web-scale dataset
(N = 233M image-text pairs), convert Renyi DP to (epsilon, delta) with
delta = 1/N, and look at the three knobs a practitioner controls:
noise multiplier, batch size and number of steps.

Run:  python3 demos/privacy_budget.py   (about ten seconds)
"""

from dpcap.accountant import MechanismParams, build_curve, epsilon, solve_sigma, to_epsilon
from dpcap.planner import TrainPlan, effective_noise, epochs_vs_batch, eps_vs_dataset_size, tan_scale

N = 233_000_000
DELTA = 1 / N

# %%
# Three budgets at batch 1.3M
# ---------------------------
# Halving the steps while raising sigma trades epsilon for compute.

B = 1_300_000
for sigma, steps in [(0.728, 5708), (1.18, 2854), (1.5, 1427)]:
    spec = epsilon(MechanismParams(sigma, B / N, steps, DELTA))
    print(f"sigma={sigma:<6} S={steps:<5} -> epsilon={spec.epsilon:.3f} (best alpha {spec.alpha:g})")

# %%
# The conversion matters. The classical RDP-to-DP bound is noticeably looser
# than the hypothesis-testing one used by default.

curve = build_curve(0.728, B / N)
for conv in ("improved", "rdp"):
    print(f"{conv:>8}: epsilon = {to_epsilon(curve, 5708, DELTA, conv).epsilon:.3f}")

# %%
# Same epsilon, different batch sizes
# -----------------------------------
# All of these runs spend about epsilon = 8 in 5708 steps. What differs is the
# noise left on the averaged gradient, sigma / B.

for batch, sigma in [(98_000, 0.474), (200_000, 0.513), (400_000, 0.564), (1_300_000, 0.728)]:
    plan = TrainPlan(N, batch, sigma, 5708)
    eps = epsilon(MechanismParams(sigma, batch / N, 5708, DELTA)).epsilon
    print(f"B={batch:>9,}  sigma={sigma:<5}  epsilon={eps:.2f}  sigma/B={effective_noise(plan):.2e}  "
          f"epochs={plan.epochs:.1f}")

# %%
# Solve for the noise instead of checking it.

print("sigma for epsilon=8 at B=1.3M, S=5708:", round(solve_sigma(8.0, B / N, 5708, DELTA), 4))

# %%
# More data buys privacy
# ----------------------
# Fixing (B, sigma, S) and growing N lowers q = B/N, so epsilon drops fast.

for n, eps in eps_vs_dataset_size(B, 0.728, 5708, [23.3e6, 116.5e6, 233e6, 1.165e9, 2.33e9]):
    print(f"N={n:>13,.0f}  epsilon={eps:7.3f}")

# %%
# Bigger batches mean fewer epochs
# --------------------------------
# At a fixed epsilon = 8 and sigma = 0.728, the step budget shrinks as the
# batch grows, and so does the number of passes over the data.

for b, steps, epochs in epochs_vs_batch(8.0, 0.728, N, [400e3, 800e3, 1.3e6, 2e6]):
    print(f"B={b:>11,.0f}  steps={steps:>6}  epochs={epochs:5.1f}")

# %%
# Rehearsing the run cheaply
# --------------------------
# Dividing batch and sigma by k keeps sigma/B and the step count, so a k-times
# cheaper run sees the same effective noise.

scaled = tan_scale(TrainPlan(N, B, 0.728, 5708), 64)
print("reference:", scaled.reference)
print("k=64 run :", scaled.scaled, f"sigma/B={effective_noise(scaled.scaled):.2e}")
