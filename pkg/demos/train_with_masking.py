"""Federated training with and without random parameter masking.

Both runs share data, partition, and initialization; only the defense
differs.  At R=0.5 the masked run tracks the standard one; at R=0.8 the
smaller effective step leaves it behind after ten epochs.
"""

import numpy as np

from flrsp.config import ExperimentConfig
from flrsp.fl import run_training

base = ExperimentConfig(epochs=10)
runs = {
    "standard": base,
    "masked R=0.5": base.replace(defense={"type": "flrsp", "R": 0.5}),
    "masked R=0.8": base.replace(defense={"type": "flrsp", "R": 0.8}),
}

for name, cfg in runs.items():
    history = run_training(cfg)
    acc = history.accuracy_by_epoch()
    print(f"{name:14s} " + " ".join(f"{a:.2f}" for a in acc))

# how often was each scalar updated in the last (R=0.8) run?
rounds = len(history.records)
counts = np.concatenate([c.ravel() for c in history.update_counts.values()])
print(f"\n{rounds} aggregations; per-scalar update counts min {counts.min()}, "
      f"median {np.median(counts):.0f}, max {counts.max()}")
print(f"expected per scalar: {rounds * (1 - 0.8 ** cfg.clients):.2f}")
