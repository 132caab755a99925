"""
Rehearsing a DP run at a fraction of the cost
=============================================

Dividing the batch size B and the noise multiplier sigma by the same factor
k keeps sigma/B, the noise on the averaged gradient, and keeps the step
count. Such a run is about k times cheaper, and if training is mostly driven
by the effective noise its loss curve should track the expensive run. A run
that keeps B but doubles sigma is the control: same cost, different noise.

Run:  python3 demos/tan_rehearsal.py   (about three minutes)
"""

from dataclasses import replace

from dpcap.captioner import SynthSpec, generate_dataset, model_from_dataset_spec, smoothed_gap, tan_equivalence_run
from dpcap.dpsgd import DpSgdConfig

spec = SynthSpec()
data = generate_dataset(spec, 2000)
held = generate_dataset(spec, 100, start=10**6)
factory = lambda: model_from_dataset_spec(spec, seed=0)

config = DpSgdConfig(sigma=1.2, B=200, N=len(data), lr=3e-3, seed=1)
steps, k = 200, 4

run = tan_equivalence_run(factory, data, config, steps, k, eval_pairs=held)
control = tan_equivalence_run(factory, data, replace(config, sigma=2 * config.sigma), steps, 1, eval_pairs=held)

ref, small = run.scaled_plan.reference, run.scaled_plan.scaled
print(f"reference  B={ref.B} sigma={ref.sigma}")
print(f"k={k} run   B={small.B} sigma={small.sigma}")
print(f"control    B={ref.B} sigma={2 * ref.sigma}")

# %%
# Held-out loss along the way.

print(f"{'step':>5} {'reference':>10} {'k=4':>8} {'2 sigma':>8}")
for t in range(0, steps, 20):
    print(f"{t:>5} {run.reference[t]:>10.3f} {run.scaled[t]:>8.3f} {control.reference[t]:>8.3f}")

# %%
# Smoothed mean absolute gap between curves; smaller means closer.

print(f"gap reference vs k={k}:   {smoothed_gap(run.reference, run.scaled):.4f}")
print(f"gap reference vs 2 sigma: {smoothed_gap(run.reference, control.reference):.4f}")
