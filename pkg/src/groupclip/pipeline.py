"""Deterministic simulation of pipeline-parallel private training.

A model is cut into K chunks of consecutive layers, one per simulated device.
A minibatch is split into J microbatches that flow through a GPipe-style
schedule (all forwards, then all backwards) on a virtual clock. Everything
runs on one thread; the event order is the total order
(start time, device, microbatch).

Two modes:

* per-device clipping: each device clips the per-example gradient of its own
  chunk at its own threshold and adds noise computed from local values only.
  One synchronization per step, no per-example norms leave a device.
* flat clipping inside the pipeline: per-example norms must be gathered
  across devices after every microbatch, which costs J synchronizations and
  one of three workarounds for the unclipped local gradients (retain and idle,
  offload to host memory, or recompute).

The update divides the accumulator by the minibatch size, matching the
single-device trainer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clip import clip_scales, fused_clipped_sum, ghost_norms
from .errors import ConfigError, DimensionError, StateError
from .nn import Linear, Model, backward_per_layer, forward, loss

WORKAROUNDS = ("retain", "offload", "rematerialize")
TRACE_COLUMNS = ["event-index", "virtual-time", "device", "microbatch", "stage", "message-type"]


@dataclass(frozen=True)
class CostModel:
    forward: float = 1.0
    backward: float = 2.0
    remat: float = 1.0
    offload: float = 1.0
    sync: float = 0.5

    def __post_init__(self):
        if min(self.forward, self.backward) <= 0 or min(self.remat, self.offload, self.sync) < 0:
            raise ConfigError(f"stage costs must be positive: {self}")


@dataclass(frozen=True)
class PipelineConfig:
    partition: tuple[int, ...]  # number of model layers hosted by each device
    microbatches: int
    thresholds: tuple[float, ...]
    sigma: float
    lr: float
    costs: CostModel = CostModel()
    flat_threshold: float | None = None

    @property
    def K(self) -> int:
        return len(self.partition)

    def validate(self, model: Model | None = None) -> None:
        if not self.partition or any(p < 1 for p in self.partition):
            raise ConfigError(f"every device must host at least one layer: {self.partition}")
        if self.microbatches < 1:
            raise ConfigError("need at least one microbatch")
        if len(self.thresholds) != self.K or any(not t > 0 for t in self.thresholds):
            raise ConfigError(f"need {self.K} positive thresholds, got {self.thresholds}")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if model is not None:
            if sum(self.partition) != len(model.layers):
                raise ConfigError(f"partition covers {sum(self.partition)} layers, model has {len(model.layers)}")
            for k, (lo, hi) in enumerate(self.bounds()):
                if not any(isinstance(l, Linear) for l in model.layers[lo:hi]):
                    raise ConfigError(f"device {k} hosts no Linear layer")

    def bounds(self) -> list[tuple[int, int]]:
        out, lo = [], 0
        for p in self.partition:
            out.append((lo, lo + p))
            lo += p
        return out

    def groups(self, model: Model) -> list[tuple[int, ...]]:
        """Linear-layer index groups matching the device partition."""
        lin_index = {p: i for i, p in enumerate(model.linear_positions)}
        return [tuple(lin_index[p] for p in range(lo, hi) if p in lin_index) for lo, hi in self.bounds()]

    def flat_C(self) -> float:
        if self.flat_threshold is not None:
            return self.flat_threshold
        return math.sqrt(sum(t * t for t in self.thresholds))


@dataclass
class Event:
    start: float
    end: float
    device: int  # -1 for collective events
    microbatch: int  # -1 when not tied to a microbatch
    stage: str  # "forward", "backward", "recompute", "sync"
    message: str = ""


@dataclass
class CommLog:
    forward_messages: int = 0
    backward_messages: int = 0
    norm_messages: int = 0
    syncs: int = 0
    busy: list[float] = field(default_factory=list)
    makespan: float = 0.0
    events: list[Event] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for i, ev in enumerate(self.events):
                w.writerow([i, repr(float(ev.start)), ev.device, ev.microbatch, ev.stage, ev.message])


def _order(events: list[Event], K: int) -> list[Event]:
    return sorted(events, key=lambda ev: (ev.start, ev.device if ev.device >= 0 else K, ev.microbatch))


def build_schedule(config: PipelineConfig, flat_workaround: str | None = None) -> list[Event]:
    """GPipe event list on the virtual clock.

    With ``flat_workaround`` set, adds the per-microbatch norm gathering of flat
    clipping and the chosen workaround's costs.
    """
    config.validate()
    if flat_workaround is not None and flat_workaround not in WORKAROUNDS:
        raise ConfigError(f"unknown workaround {flat_workaround!r}; expected one of {WORKAROUNDS}")
    K, J, c = config.K, config.microbatches, config.costs
    events: list[Event] = []
    f_end = [[0.0] * J for _ in range(K)]
    for j in range(J):
        for k in range(K):
            start = max(f_end[k - 1][j] if k > 0 else 0.0, f_end[k][j - 1] if j > 0 else 0.0)
            f_end[k][j] = start + c.forward
            events.append(Event(start, f_end[k][j], k, j, "forward", "activation" if k < K - 1 else ""))

    b_dur = c.remat + c.backward + (c.offload if flat_workaround == "offload" else 0.0)
    b_end = [[0.0] * J for _ in range(K)]
    sync_end = [0.0] * J
    for j in range(J):
        for k in range(K - 1, -1, -1):
            start = max(f_end[k][J - 1], b_end[k + 1][j] if k < K - 1 else 0.0, b_end[k][j - 1] if j > 0 else 0.0)
            if flat_workaround == "retain" and j > 0:
                start = max(start, sync_end[j - 1])
            b_end[k][j] = start + b_dur
            msg = "gradient" if k > 0 else ""
            if flat_workaround is not None:
                msg = f"{msg}+norms" if msg else "norms"
            events.append(Event(start, b_end[k][j], k, j, "backward", msg))
        if flat_workaround is not None:
            s = max(b_end[k][j] for k in range(K))
            sync_end[j] = s + c.sync
            events.append(Event(s, sync_end[j], -1, j, "sync"))

    device_free = [b_end[k][J - 1] for k in range(K)]
    if flat_workaround == "rematerialize":
        for j in range(J):
            for k in range(K):
                start = max(device_free[k], sync_end[j])
                device_free[k] = start + c.backward
                events.append(Event(start, device_free[k], k, j, "recompute"))
    if flat_workaround is None:
        s = max(device_free)
        events.append(Event(s, s + c.sync, -1, -1, "sync"))
    return _order(events, K)


def makespan(events: Sequence[Event]) -> float:
    return max(ev.end for ev in events)


def device_noise_std(sigma: float, K: int, C_k: float) -> float:
    """Noise std on one device under the equal-budget allocation: sigma * sqrt(K) * C_k.

    Depends only on values the device knows locally. A zero multiplier means no noise,
    even when the threshold is infinite.
    """
    if sigma == 0.0:
        return 0.0
    return sigma * math.sqrt(K) * C_k


@dataclass
class DeviceState:
    k: int
    start: int
    stop: int
    threshold: float
    u: np.ndarray
    store: dict[int, np.ndarray] = field(default_factory=dict)
    retained: dict[int, list] = field(default_factory=dict)
    noise_draws: int = 0


def _chunk_pairs(model: Model, dev: DeviceState, inp: np.ndarray, upstream, loss_kind: str, is_last: bool):
    """Recompute the chunk's forward from the stored input, backprop, collect (a, e)."""
    out, tape = forward(model, inp, dev.start, dev.stop)
    if is_last:
        _, dout = loss(out, upstream, loss_kind)
    else:
        dout = upstream
        if dout.shape != out.shape:
            raise DimensionError(f"device {dev.k}: output gradient {dout.shape} vs activation {out.shape}")
    pairs: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def collect(i, a, e):
        pairs[i] = (a, e)

    g_in = backward_per_layer(model, tape, dout, collect, dev.start, dev.stop)
    return [pairs[i] for i in sorted(pairs)], g_in


def local_forward(model: Model, dev: DeviceState, j: int, incoming: np.ndarray, log: CommLog, K: int) -> np.ndarray:
    out, _ = forward(model, incoming, dev.start, dev.stop)
    if j not in dev.store:
        dev.store[j] = incoming.copy()  # host-memory copy used for recomputation
    if dev.k < K - 1:
        log.forward_messages += 1
    return out


def local_backward(model: Model, dev: DeviceState, j: int, upstream, log: CommLog, K: int,
                   loss_kind: str = "cross_entropy") -> np.ndarray | None:
    """Per-device clip-and-accumulate for microbatch ``j``; returns input gradients."""
    if j not in dev.store:
        raise StateError(f"device {dev.k} has no stored activations for microbatch {j}")
    inp = dev.store.pop(j)
    pairs, g_in = _chunk_pairs(model, dev, inp, upstream, loss_kind, dev.k == K - 1)
    norms = np.sqrt(sum(ghost_norms(a, e) for a, e in pairs))
    scales = clip_scales(norms, dev.threshold)
    dev.u += np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in
                             (fused_clipped_sum(a, e, scales) for a, e in pairs)])
    if dev.k > 0:
        log.backward_messages += 1
    return g_in


@dataclass
class PipelineResult:
    model: Model
    comm: CommLog
    updates: list[np.ndarray]


def _setup(config: PipelineConfig, model: Model, x: np.ndarray):
    config.validate(model)
    n = len(x)
    if config.microbatches > n:
        raise ConfigError(f"{config.microbatches} microbatches for a minibatch of {n}")
    # remainder policy: np.array_split gives the first n % J microbatches one extra example
    splits = np.array_split(np.arange(n), config.microbatches)
    work = model.copy().regroup(config.groups(model))
    sizes = work.group_sizes()
    devices = [DeviceState(k, lo, hi, config.thresholds[k], np.zeros(sizes[k]))
               for k, (lo, hi) in enumerate(config.bounds())]
    return work, splits, devices


def _finish(config: PipelineConfig, work: Model, devices, n: int, log: CommLog, events) -> PipelineResult:
    log.events = events
    log.makespan = makespan(events)
    log.busy = [sum(ev.end - ev.start for ev in events if ev.device == k) for k in range(config.K)]
    updates = []
    for k, dev in enumerate(devices):
        step = config.lr * dev.u / n
        work.set_group_params(k, work.get_group_params(k) - step)
        updates.append(step)
    return PipelineResult(work, log, updates)


def pipeline_step(config: PipelineConfig, model: Model, x: np.ndarray, y: np.ndarray,
                  rng: np.random.Generator, loss_kind: str = "cross_entropy") -> PipelineResult:
    """One update with per-device clipping. ``model`` is not modified."""
    work, splits, devices = _setup(config, model, x)
    K = config.K
    log = CommLog()
    # noise enters each accumulator once, at initialization, in device order
    for dev in devices:
        dev.u += rng.standard_normal(dev.u.size) * device_noise_std(config.sigma, K, dev.threshold)
        dev.noise_draws += 1
    acts: dict[tuple[int, int], np.ndarray] = {}
    grads: dict[tuple[int, int], np.ndarray] = {}
    events = build_schedule(config)
    for ev in events:
        k, j = ev.device, ev.microbatch
        if ev.stage == "forward":
            inp = x[splits[j]] if k == 0 else acts.pop((k - 1, j))
            acts[(k, j)] = local_forward(work, devices[k], j, inp, log, K)
        elif ev.stage == "backward":
            if k == K - 1:
                acts.pop((k, j))
                upstream = y[splits[j]]
            else:
                upstream = grads.pop((k + 1, j))
            g_in = local_backward(work, devices[k], j, upstream, log, K, loss_kind)
            if k > 0:
                grads[(k, j)] = g_in
        elif ev.stage == "sync":
            log.syncs += 1
    return _finish(config, work, devices, len(x), log, events)


def flat_in_pipeline_step(config: PipelineConfig, model: Model, x: np.ndarray, y: np.ndarray,
                          rng: np.random.Generator, workaround: str = "retain",
                          loss_kind: str = "cross_entropy") -> PipelineResult:
    """One update with exact flat clipping at ``config.flat_C()`` inside the pipeline."""
    work, splits, devices = _setup(config, model, x)
    K = config.K
    C = config.flat_C()
    log = CommLog()
    for dev in devices:
        dev.u += rng.standard_normal(dev.u.size) * (config.sigma * C if config.sigma else 0.0)
        dev.noise_draws += 1
    acts: dict[tuple[int, int], np.ndarray] = {}
    grads: dict[tuple[int, int], np.ndarray] = {}
    events = build_schedule(config, flat_workaround=workaround)
    for ev in events:
        k, j = ev.device, ev.microbatch
        if ev.stage == "forward":
            inp = x[splits[j]] if k == 0 else acts.pop((k - 1, j))
            acts[(k, j)] = local_forward(work, devices[k], j, inp, log, K)
        elif ev.stage == "backward":
            dev = devices[k]
            if k == K - 1:
                acts.pop((k, j))
                upstream = y[splits[j]]
            else:
                upstream = grads.pop((k + 1, j))
            if j not in dev.store:
                raise StateError(f"device {k} has no stored activations for microbatch {j}")
            pairs, g_in = _chunk_pairs(work, dev, dev.store.pop(j), upstream, loss_kind, k == K - 1)
            dev.retained[j] = pairs
            log.norm_messages += 1
            if k > 0:
                grads[(k, j)] = g_in
                log.backward_messages += 1
        elif ev.stage == "sync":
            log.syncs += 1
            partial = [sum(ghost_norms(a, e) for a, e in dev.retained[j]) for dev in devices]
            scales = clip_scales(np.sqrt(sum(partial)), C)
            for dev in devices:
                dev.u += np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in
                                         (fused_clipped_sum(a, e, scales) for a, e in dev.retained.pop(j))])
    return _finish(config, work, devices, len(x), log, events)
