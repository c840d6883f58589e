"""Monte Carlo cross validation: repeated random holdout splits."""

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CrossValidationPlan:
    iterations: int
    holdout_size: int
    seed: int
    splits: list = field(default_factory=list)  # list of (train_ids, val_ids)

    def to_json(self, path=None):
        doc = {
            "iterations": self.iterations,
            "holdout_size": self.holdout_size,
            "seed": self.seed,
            "splits": [{"train": list(tr), "val": list(va)} for tr, va in self.splits],
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        splits = [(s["train"], s["val"]) for s in doc["splits"]]
        return cls(doc["iterations"], doc["holdout_size"], doc["seed"], splits)


def monte_carlo_split(ids, holdout, iterations, seed):
    """Independent uniform holdout draws, one per iteration.

    Each split's validation set is holdout ids sampled without
    replacement; train is the rest, input order preserved. Deterministic
    per seed.
    """
    ids = list(ids)
    if holdout >= len(ids):
        raise ValueError(f"holdout {holdout} must be smaller than the id set ({len(ids)})")
    if holdout < 0 or iterations < 1:
        raise ValueError("holdout must be >= 0 and iterations >= 1")
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(iterations):
        chosen = rng.choice(len(ids), size=holdout, replace=False)
        val_mask = np.zeros(len(ids), dtype=bool)
        val_mask[chosen] = True
        val = [ids[i] for i in range(len(ids)) if val_mask[i]]
        train = [ids[i] for i in range(len(ids)) if not val_mask[i]]
        splits.append((train, val))
    return CrossValidationPlan(iterations, holdout, seed, splits)
