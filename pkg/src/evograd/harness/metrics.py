"""Metrics emission and summaries.

The harness writes one long-format CSV per run with the exact header
``run_id,seed,step,metric_name,value``: UTF-8, LF line endings, floats
printed with 17 significant digits so identical runs produce identical
bytes. Wall-clock timings never enter these files (they would break
byte-reproducibility); timing lives in the cost-sweep CSVs, which are
documented as the one non-reproducible output.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

LONG_HEADER = ["run_id", "seed", "step", "metric_name", "value"]


def fmt(value) -> str:
    """Canonical float formatting: 17 significant digits."""
    return format(float(value), ".17g")


@dataclass
class MetricsRecord:
    """One step's measurements; None fields are simply not emitted."""

    run_id: str
    seed: int
    step: int
    loss_train: float | None = None
    loss_val: float | None = None
    accuracy: float | None = None
    lambda_snapshot: float | None = None
    hypergrad_norm: float | None = None
    tape_nodes: int | None = None
    stored_bytes: int | None = None
    forward_passes: int | None = None
    backward_passes: int | None = None
    extra: dict | None = None

    _NAMES = ("loss_train", "loss_val", "accuracy", "lambda_snapshot",
              "hypergrad_norm", "tape_nodes", "stored_bytes",
              "forward_passes", "backward_passes")

    def rows(self):
        for name in self._NAMES:
            v = getattr(self, name)
            if v is not None:
                metric = "lambda" if name == "lambda_snapshot" else name
                yield (self.run_id, self.seed, self.step, metric, fmt(v))
        for name, v in (self.extra or {}).items():
            yield (self.run_id, self.seed, self.step, name, fmt(v))


class MetricsWriter:
    """Serialised writer for the long-format CSV; header written exactly once."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(LONG_HEADER)

    def write(self, record: MetricsRecord):
        for row in record.rows():
            self._writer.writerow(row)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MalformedCSV(ValueError):
    pass


def summarize(csv_path) -> dict:
    """Per-metric mean/std (population convention) across seeds at the
    final recorded step of each seed's run.

    Only the long metrics schema is accepted; other harness CSVs (the 1-d
    grid table, cost sweeps) carry their own summaries at write time.
    """
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCSV(f"{csv_path}: empty CSV") from None
        if header != LONG_HEADER:
            raise MalformedCSV(
                f"{csv_path}: row 1: expected header {','.join(LONG_HEADER)}")

        # latest step per (metric, run_id, seed)
        latest: dict[tuple, tuple[int, float]] = {}
        n_rows = 0
        for i, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise MalformedCSV(f"{csv_path}: row {i}: expected 5 fields, got {len(row)}")
            run_id, seed_s, step_s, metric, value_s = row
            try:
                seed = int(seed_s)
                step = int(step_s)
                value = float(value_s)
            except ValueError as e:
                raise MalformedCSV(f"{csv_path}: row {i}: {e}") from None
            n_rows += 1
            key = (metric, run_id, seed)
            if key not in latest or step >= latest[key][0]:
                latest[key] = (step, value)

    if n_rows == 0:
        raise MalformedCSV(f"{csv_path}: no data rows")

    by_metric: dict[str, list[float]] = {}
    for (metric, _run, _seed), (_step, value) in latest.items():
        by_metric.setdefault(metric, []).append(value)

    metrics = {}
    for metric, values in sorted(by_metric.items()):
        n = len(values)
        mean = sum(values) / n
        var = sum((v - mean) ** 2 for v in values) / n
        metrics[metric] = {"mean": mean, "std": var ** 0.5, "n": n}
    return {"metrics": metrics}


def write_json(path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
