"""Per-step metrics and per-group gradient-norm histograms as CSV.

metrics.csv columns, in order::

    step, epoch, loss, accuracy,
    threshold_1..threshold_K, clipped_fraction_1..clipped_fraction_K,
    noise_std_1..noise_std_K, wall_time_ms, peak_grad_bytes

norms.csv columns::

    step, group, q05, q25, q50, q75, q85, q95

Groups are numbered from 1 (input side) in both files. Quantiles use exact
order statistics with the midpoint rule between neighbours. Reals are written
with ``repr`` so files are byte-stable across runs. ``wall_time_ms`` is only
filled when timing is enabled, otherwise it is 0, so that runs stay
byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

QUANTILES = (5, 25, 50, 75, 85, 95)
NORM_COLUMNS = ["step", "group"] + [f"q{q:02d}" for q in QUANTILES]


def metrics_columns(K: int) -> list[str]:
    cols = ["step", "epoch", "loss", "accuracy"]
    for name in ("threshold", "clipped_fraction", "noise_std"):
        cols += [f"{name}_{k}" for k in range(1, K + 1)]
    return cols + ["wall_time_ms", "peak_grad_bytes"]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def norm_quantiles(norms) -> list[float]:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ValueError("no norms to summarize")
    return [float(v) for v in np.percentile(norms, QUANTILES, method="midpoint")]


def emit_telemetry(rows: list, step: int, group_norms: Sequence[np.ndarray]) -> None:
    """Append one NormHistogram row per group with nonempty norms."""
    for k, norms in enumerate(group_norms):
        if len(norms):
            rows.append([step, k + 1, *norm_quantiles(norms)])


class CsvSink:
    """Train-loop sink writing metrics.csv and norms.csv into ``out_dir``."""

    def __init__(self, out_dir: str | Path, K: int, steps_per_epoch: int, record_timing: bool = False):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.K = K
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.record_timing = record_timing
        self._mf = open(out / "metrics.csv", "w", newline="")
        self._nf = open(out / "norms.csv", "w", newline="")
        self._m = csv.writer(self._mf, lineterminator="\n")
        self._n = csv.writer(self._nf, lineterminator="\n")
        self._m.writerow(metrics_columns(K))
        self._n.writerow(NORM_COLUMNS)
        self.norm_rows: list = []

    def __call__(self, info) -> None:
        epoch = info.step // self.steps_per_epoch + 1
        wall = info.clip_seconds * 1e3 if self.record_timing else 0.0
        row = [info.step, epoch, info.loss, info.accuracy, *info.thresholds, *info.clipped_fraction,
               *info.noise_stds, wall, info.peak_grad_bytes]
        self._m.writerow([_fmt(v) for v in row])
        rows: list = []
        emit_telemetry(rows, info.step, info.group_norms)
        for r in rows:
            self._n.writerow([_fmt(v) for v in r])
        self.norm_rows.extend(rows)

    def close(self) -> None:
        self._mf.close()
        self._nf.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def epoch_medians(norm_rows: Sequence[Sequence[float]], group: int, steps_per_epoch: int) -> list[float]:
    """Mean over each epoch's steps of the per-step median norm of ``group`` (1-based)."""
    by_epoch: dict[int, list[float]] = {}
    for row in norm_rows:
        if int(row[1]) == group:
            by_epoch.setdefault(int(row[0]) // steps_per_epoch, []).append(float(row[4]))
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]
