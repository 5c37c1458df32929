"""Desk-scale experiment definitions.

Three problems exercise the estimator end to end: the 1-d bilevel problem
with its closed-form oracle, rotation-transformer meta-learning on
synthetic glyphs, and instance-loss reweighting under label noise.
"""

import csv

import numpy as np

from evograd.problems import models, one_d, reweight, rotation
from evograd.problems.reweight import NoisyLabelTask, gen_noisy_classification
from evograd.problems.rotation import RotationTask, gen_rotated_digits

__all__ = [
    "models", "one_d", "reweight", "rotation",
    "NoisyLabelTask", "RotationTask",
    "gen_noisy_classification", "gen_rotated_digits",
    "export_instances_csv",
]


def export_instances_csv(path, x, y, corrupted=None):
    """One row per instance: features..., label, corrupted-flag."""
    x = np.asarray(x)
    y = np.asarray(y)
    corrupted = np.zeros(len(y), dtype=bool) if corrupted is None else np.asarray(corrupted)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"feature_{i}" for i in range(x.shape[1])] + ["label", "corrupted"])
        for xi, yi, ci in zip(x, y, corrupted):
            writer.writerow([format(v, ".17g") for v in xi] + [int(yi), int(ci)])
