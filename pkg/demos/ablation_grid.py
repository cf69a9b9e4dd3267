"""
Module ablation on both scenarios
=================================

Switch the whitening and alignment modules on and off, and compare against
the late-fusion baseline. This is the grid ``mmfl ablate`` writes, shown here
with two seeds so it finishes in a few minutes.
"""

# %%
import dataclasses
from statistics import median

from mmfl.data import DatasetSpec, generate_dataset, partition
from mmfl.federation import FederationConfig, msfedavg_train, run_experiment

ds = generate_dataset(DatasetSpec(seed=0))
seeds = (0, 1)
rows = {
    "MF": dict(fw=False, mim=False),
    "MF+MIM": dict(fw=False, mim=True),
    "MF+FW": dict(fw=True, mim=False),
    "MF+FW+MIM": dict(fw=True, mim=True),
}

# %%
table = {}
for scenario in (1, 2):
    parts = {s: partition(ds, 6, scenario=scenario, seed=s) for s in seeds}
    for name, toggles in rows.items():
        scores = [run_experiment(FederationConfig(seed=s, **toggles), parts[s]).report.macro_f1 for s in seeds]
        table[name, scenario] = median(scores)
    base = FederationConfig()
    table["MSFedAvg", scenario] = median(
        msfedavg_train(dataclasses.replace(base, seed=s), parts[s]).report.macro_f1 for s in seeds)

# %%
print(f"{'method':<10} {'scenario 1':>10} {'scenario 2':>10}")
for name in (*rows, "MSFedAvg"):
    print(f"{name:<10} {table[name, 1]:>10.3f} {table[name, 2]:>10.3f}")
