"""Clipping-mode timing and memory benchmark.

Each step draws a batch, runs the forward pass outside the clock, then times
only the backward pass together with whatever clipping the mode performs.
Peak gradient memory comes from the allocation meter in ``groupclip.clip``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..clip import Flat, _alloc, clip_per_group, flat_two_phase, grad_meter, naive_oracle
from ..nn import Model, forward, loss, mlp, param_grads

BENCH_MODES = ("nonprivate", "naive-flat", "two-phase-flat", "fused-perlayer")
BENCH_WIDTHS = (512, 512, 512, 10)


@dataclass
class BenchRow:
    mode: str
    median_ms: float
    steps_per_s: float
    peak_grad_bytes: int
    peak_cached_bytes: int


def _region(mode: str, model: Model, C: float) -> Callable:
    K = model.num_groups
    per_layer = [C / math.sqrt(K)] * K
    if mode == "nonprivate":
        def plain(x, y, tape, dl):
            grads = param_grads(model, tape, dl)
            _alloc(*(g for pair in grads for g in pair))
            return grads
        return plain
    if mode == "naive-flat":
        return lambda x, y, tape, dl: naive_oracle(model, x, y, Flat(C), tape=tape, dlogits=dl)
    if mode == "two-phase-flat":
        return lambda x, y, tape, dl: flat_two_phase(model, tape, dl, C)
    if mode == "fused-perlayer":
        return lambda x, y, tape, dl: clip_per_group(model, tape, dl, per_layer)
    raise ValueError(f"unknown bench mode {mode!r}; expected one of {BENCH_MODES}")


def time_mode(mode: str, model: Model, batch: int, *, steps: int = 100, warmup: int = 20,
              C: float = 1.0, seed: int = 0) -> BenchRow:
    rng = np.random.default_rng(seed)
    d_in = model.linears[0].in_features
    classes = model.linears[-1].out_features
    region = _region(mode, model, C)
    times = []
    peak = cached = 0
    for t in range(warmup + steps):
        x = rng.standard_normal((batch, d_in))
        y = rng.integers(0, classes, batch)
        logits, tape = forward(model, x)
        _, dl = loss(logits, y)
        with grad_meter() as meter:
            t0 = time.perf_counter()
            out = region(x, y, tape, dl)
            dt = time.perf_counter() - t0
        del out
        if t >= warmup:
            times.append(dt)
            peak = max(peak, meter.peak)
            cached = max(cached, meter.cached_peak)
    med = float(np.median(times))
    return BenchRow(mode, med * 1e3, 1.0 / med, peak, cached)


def run_bench(widths: Sequence[int] = BENCH_WIDTHS, batch: int = 256, *, steps: int = 100, warmup: int = 20,
              modes: Sequence[str] = BENCH_MODES, seed: int = 0) -> list[BenchRow]:
    model = mlp(widths, "relu", np.random.default_rng(seed))
    return [time_mode(m, model, batch, steps=steps, warmup=warmup, seed=seed + 1) for m in modes]


def format_bench(rows: Sequence[BenchRow]) -> str:
    base = next((r.median_ms for r in rows if r.mode == "nonprivate"), None)
    lines = [f"{'mode':<18}{'median ms':>11}{'steps/s':>10}{'vs nonprivate':>15}{'peak grad MB':>14}{'cached MB':>11}"]
    for r in rows:
        rel = f"{r.median_ms / base:.2f}x" if base else "-"
        lines.append(f"{r.mode:<18}{r.median_ms:>11.2f}{r.steps_per_s:>10.1f}{rel:>15}{r.peak_grad_bytes / 2**20:>14.2f}"
                     f"{r.peak_cached_bytes / 2**20:>11.2f}")
    return "\n".join(lines)
