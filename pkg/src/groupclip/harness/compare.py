"""Multi-seed comparison of clipping modes on one task."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .run import run_training
from .telemetry import epoch_medians

DEFAULT_MODES = ("adaptive-perlayer", "fixed-perlayer", "flat")


@dataclass
class SeedResult:
    mode: str
    seed: int
    test_accuracy: float
    group1_epoch_medians: list[float]


def _one(cfg: RunConfig) -> SeedResult:
    res = run_training(cfg)
    meds = epoch_medians(res.norm_rows, 1, res.steps_per_epoch)
    return SeedResult(cfg.mode, cfg.seed, res.test_accuracy, meds)


def max_workers() -> int:
    raw = os.environ.get("GROUPCLIP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def compare(cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), modes: Sequence[str] = DEFAULT_MODES,
            workers: int | None = None) -> dict[str, list[SeedResult]]:
    """Run every (mode, seed); results are grouped by mode and ordered by seed."""
    jobs = [replace(cfg, mode=m, seed=s) for m in modes for s in seeds]
    workers = min(workers or max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]
    out: dict[str, list[SeedResult]] = {m: [] for m in modes}
    for r in results:
        out[r.mode].append(r)
    for m in out:
        out[m].sort(key=lambda r: r.seed)
    return out


def format_table(results: dict[str, list[SeedResult]]) -> str:
    lines = [f"{'mode':<20}{'mean acc %':>12}{'std':>8}   per-seed"]
    for mode, rs in results.items():
        accs = np.array([r.test_accuracy for r in rs]) * 100
        per = " ".join(f"{a:.2f}" for a in accs)
        lines.append(f"{mode:<20}{accs.mean():>12.2f}{accs.std():>8.2f}   {per}")
    return "\n".join(lines)
