"""Small end-to-end detection run: synthesise windows, train both detector
families with the reference hyperparameters and print the metrics table.

The sizes here are reduced so the script finishes in a few minutes; the
acceptance suite runs the 1000 + 1000 version.
"""
import sys

import numpy as np

from evcsguard.dataset import DatasetConfig, split, synthesize_dataset
from evcsguard.tuning import REFERENCE_CONFIGS, evaluate, fit, format_table

n = int(sys.argv[1]) if len(sys.argv) > 1 else 200
ds = synthesize_dataset(DatasetConfig(n_normal=n, n_attack=n, regime=5, seed=11))
train, test = split(ds, 0.8, np.random.default_rng([11, 5]))
print(f"{len(train)} training windows, {len(test)} test windows")

results = {}
for family in ("lstm", "convlstm"):
    ck, hist = fit(family, REFERENCE_CONFIGS[(family, 5)], train, log=print)
    results[f"{family} 5-Attack"] = evaluate(ck, test)
print(format_table(results))
