"""Per-example clipping of Linear-layer gradients.

Three ways to get clipped, summed gradients out of one backward pass:

* ``clip_per_group``: group-wise clipping fused into backpropagation. A group is
  clipped as soon as the backward pass has produced the output gradients of
  all of its layers; per-example gradients are never formed.
* ``flat_two_phase``: flat clipping over cached (activation, output-gradient)
  pairs. Phase one gathers total per-example norms, phase two rescales.
* ``naive_oracle``: materializes every per-example gradient, then clips. This
  is the reference the two fused paths are tested against.

Gradient buffer allocations are reported to the active ``GradMeter`` (see
``grad_meter``) so memory use of the paths can be compared.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, InputError, StateError
from .nn import Model, backward_per_layer, forward, loss


@dataclass
class ParamGroup:
    k: int
    size: int
    threshold: float
    weight: float = 1.0

    def __post_init__(self):
        if self.size < 1 or not self.threshold > 0 or not self.weight > 0:
            raise InputError(f"invalid group {self}: need size >= 1, threshold > 0, weight > 0")


@dataclass(frozen=True)
class Flat:
    C: float

    def __post_init__(self):
        if not self.C > 0:
            raise InputError(f"flat threshold must be positive, got {self.C}")


@dataclass(frozen=True)
class FixedPerLayer:
    thresholds: tuple[float, ...]

    def __post_init__(self):
        _check_thresholds(self.thresholds)


@dataclass(frozen=True)
class AdaptivePerLayer:
    """Thresholds tracked by per-group quantile estimators.

    If ``global_threshold`` is set, clipping uses the estimates rescaled so that
    their root-sum-square equals it (see ``normalize_thresholds``); clip counts
    are always taken against the raw estimates.
    """

    q: float
    eta: float
    sigma_b: float
    thresholds: tuple[float, ...]
    global_threshold: float | None = None

    def __post_init__(self):
        if not 0 < self.q < 1 or not self.eta > 0 or self.sigma_b < 0:
            raise InputError(f"invalid adaptive policy q={self.q} eta={self.eta} sigma_b={self.sigma_b}")
        _check_thresholds(self.thresholds)
        if self.global_threshold is not None and not self.global_threshold > 0:
            raise InputError(f"global threshold must be positive, got {self.global_threshold}")


ClipPolicy = Flat | FixedPerLayer | AdaptivePerLayer


def _check_thresholds(ts: Sequence[float]) -> None:
    if any(not t > 0 for t in ts):
        raise InputError(f"clipping thresholds must be positive, got {list(ts)}")


@dataclass
class GroupGradState:
    """Clipped sum, per-example norms and clip count for one group."""

    grads: list[tuple[np.ndarray, np.ndarray]]  # (dW, db) per Linear layer in the group
    norms: np.ndarray
    count: int
    scales: np.ndarray = field(repr=False, default=None)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in self.grads])


# ---------------------------------------------------------------- memory meter


class GradMeter:
    """Tracks bytes held in gradient buffers (summed or per-example).

    ``cached_peak`` separately tracks (activation, output-gradient) pairs kept
    alive while waiting to be clipped.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.cached = 0
        self.cached_peak = 0

    def alloc(self, nbytes: int) -> None:
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def free(self, nbytes: int) -> None:
        self.current -= nbytes

    def hold(self, nbytes: int) -> None:
        self.cached += nbytes
        self.cached_peak = max(self.cached_peak, self.cached)

    def release(self, nbytes: int) -> None:
        self.cached -= nbytes


_METER: ContextVar[GradMeter | None] = ContextVar("groupclip_grad_meter", default=None)


@contextmanager
def grad_meter():
    meter = GradMeter()
    token = _METER.set(meter)
    try:
        yield meter
    finally:
        _METER.reset(token)


def _alloc(*arrays: np.ndarray) -> None:
    m = _METER.get()
    if m is not None:
        m.alloc(sum(a.nbytes for a in arrays))


def _free(*arrays: np.ndarray) -> None:
    m = _METER.get()
    if m is not None:
        m.free(sum(a.nbytes for a in arrays))


def _hold(a: np.ndarray, e: np.ndarray, sign: int = 1) -> None:
    m = _METER.get()
    if m is not None:
        (m.hold if sign > 0 else m.release)(a.nbytes + e.nbytes)


# ---------------------------------------------------------------- primitives


def _check_pair(a: np.ndarray, e: np.ndarray) -> None:
    if a.ndim not in (2, 3) or a.ndim != e.ndim or a.shape[:-1] != e.shape[:-1]:
        raise DimensionError(f"activation {a.shape} and output gradient {e.shape} do not share batch dimensions")


def ghost_norm_parts(a: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared per-example norms of the weight and bias gradients, separately."""
    _check_pair(a, e)
    if a.ndim == 2:
        return kernels.ghost_sq_2d(a, e)
    return kernels.ghost_sq_seq(a, e)


def ghost_norms(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Squared norms of per-example Linear-layer gradients (weight and bias together)."""
    w_sq, b_sq = ghost_norm_parts(a, e)
    return w_sq + b_sq


def clip_scale(norm: float, C: float) -> float:
    if norm == 0.0:
        return 1.0
    return min(1.0, C / norm)


def clip_scales(norms: np.ndarray, C: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(norms > 0, np.minimum(1.0, C / np.where(norms > 0, norms, 1.0)), 1.0)


def fused_clipped_sum(a: np.ndarray, e: np.ndarray, scales: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """sum_i scales[i] * (per-example gradient i), as one product against row-scaled ``e``."""
    _check_pair(a, e)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (a.shape[0],):
        raise DimensionError(f"expected {a.shape[0]} scales, got shape {scales.shape}")
    es = e * (scales[:, None] if e.ndim == 2 else scales[:, None, None])
    es2 = es.reshape(-1, es.shape[-1])
    a2 = a.reshape(-1, a.shape[-1])
    return es2.T @ a2, es2.sum(axis=0)


def normalize_thresholds(thresholds: Sequence[float], C_global: float) -> list[float]:
    """Rescale per-group thresholds so their root-sum-square equals ``C_global``."""
    ts = np.asarray(thresholds, dtype=np.float64)
    if ts.size == 0 or np.any(ts < 0) or not np.any(ts > 0) or not np.all(np.isfinite(ts)):
        raise InputError(f"thresholds must be finite, nonnegative and not all zero, got {list(ts)}")
    if math.isinf(C_global):
        return [math.inf] * ts.size
    total = math.sqrt(float(np.dot(ts, ts)))
    return [float(C_global * t / total) for t in ts]


# ---------------------------------------------------------------- fused group-wise path


class GroupClipper:
    """Backward visitor performing group-wise clip-and-accumulate.

    Linear layers arrive in decreasing order; a group is finalized when its
    first layer is visited. Only that group's (a, e) pairs are held meanwhile.
    """

    def __init__(self, model: Model, thresholds: Sequence[float], count_thresholds: Sequence[float] | None = None):
        if len(thresholds) != model.num_groups:
            raise InputError(f"{len(thresholds)} thresholds for {model.num_groups} groups")
        _check_thresholds(thresholds)
        self.model = model
        self.thresholds = [float(t) for t in thresholds]
        self.count_thresholds = [float(t) for t in (count_thresholds if count_thresholds is not None else thresholds)]
        self.group_of = model.group_of_linear()
        self.states: list[GroupGradState | None] = [None] * model.num_groups
        self.visit_order: list[int] = []
        self._pending: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __call__(self, i: int, a: np.ndarray, e: np.ndarray) -> None:
        k = self.group_of[i]
        self._pending[i] = (a, e)
        _hold(a, e)
        if i != self.model.groups[k][0]:
            return
        layers = self.model.groups[k]
        sq = sum(ghost_norms(*self._pending[j]) for j in layers)
        norms = np.sqrt(sq)
        scales = clip_scales(norms, self.thresholds[k])
        grads = []
        for j in layers:
            pair = self._pending.pop(j)
            gw, gb = fused_clipped_sum(*pair, scales)
            _hold(*pair, sign=-1)
            _alloc(gw, gb)
            grads.append((gw, gb))
        count = int(np.count_nonzero(norms <= self.count_thresholds[k]))
        self.states[k] = GroupGradState(grads, norms, count, scales)
        self.visit_order.append(k)


def clip_per_group(model: Model, tape, dlogits: np.ndarray, thresholds: Sequence[float],
                   count_thresholds: Sequence[float] | None = None) -> list[GroupGradState]:
    clipper = GroupClipper(model, thresholds, count_thresholds)
    backward_per_layer(model, tape, dlogits, clipper)
    return clipper.states


def flat_two_phase(model: Model, tape, dlogits: np.ndarray, C: float) -> list[GroupGradState]:
    """Exact flat clipping from one backward pass over cached (a, e) pairs.

    Returned states share the total per-example norms; ``count`` is the number
    of examples whose total norm is at most ``C``.
    """
    if not C > 0:
        raise InputError(f"threshold must be positive, got {C}")
    pairs: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def collect(i, a, e):
        pairs[i] = (a, e)
        _hold(a, e)

    backward_per_layer(model, tape, dlogits, collect)
    if len(pairs) != len(model.linear_positions):
        raise StateError("backward pass did not reach every Linear layer")
    # phase 1: total per-example norms
    norms = np.sqrt(sum(ghost_norms(*pairs[i]) for i in range(len(pairs))))
    scales = clip_scales(norms, C)
    count = int(np.count_nonzero(norms <= C))
    # phase 2: one global scale per example applied to every layer
    states = []
    for g in model.groups:
        grads = []
        for i in g:
            gw, gb = fused_clipped_sum(*pairs[i], scales)
            _alloc(gw, gb)
            grads.append((gw, gb))
        states.append(GroupGradState(grads, norms, count, scales))
    for pair in pairs.values():
        _hold(*pair, sign=-1)
    return states


# ---------------------------------------------------------------- reference


def per_example_grads(model: Model, x: np.ndarray, labels, loss_kind: str = "cross_entropy", tape=None, dlogits=None):
    """Materialized per-example gradients: list of (B, out, in), (B, out) per Linear layer.

    Pass ``tape`` and ``dlogits`` to reuse an existing forward pass.
    """
    if tape is None:
        logits, tape = forward(model, x)
        _, dlogits = loss(logits, labels, loss_kind)
    out: list = [None] * len(model.linear_positions)

    def visit(i, a, e):
        gw, gb = kernels.materialize(a, e)
        _alloc(gw, gb)
        out[i] = (gw, gb)

    backward_per_layer(model, tape, dlogits, visit)
    return out


def naive_oracle(model: Model, x: np.ndarray, labels, policy: ClipPolicy,
                 loss_kind: str = "cross_entropy", thresholds: Sequence[float] | None = None,
                 tape=None, dlogits=None) -> list[GroupGradState]:
    """Clip materialized per-example gradients according to ``policy``.

    ``thresholds`` overrides the policy's per-group thresholds (used to replay
    an adaptive run at its current thresholds).
    """
    pe = per_example_grads(model, x, labels, loss_kind, tape, dlogits)
    n = np.asarray(x).shape[0]
    group_sq = []
    for g in model.groups:
        sq = np.zeros(n)
        for i in g:
            gw, gb = pe[i]
            sq += np.einsum("boi,boi->b", gw, gw) + np.einsum("bo,bo->b", gb, gb)
        group_sq.append(sq)

    if isinstance(policy, Flat):
        norms_total = np.sqrt(sum(group_sq))
        scales_all = [clip_scales(norms_total, policy.C)] * model.num_groups
        norms_all = [norms_total] * model.num_groups
        counts = [int(np.count_nonzero(norms_total <= policy.C))] * model.num_groups
    else:
        ts = list(thresholds) if thresholds is not None else list(policy.thresholds)
        if len(ts) != model.num_groups:
            raise InputError(f"{len(ts)} thresholds for {model.num_groups} groups")
        count_ts = ts
        if isinstance(policy, AdaptivePerLayer) and policy.global_threshold is not None:
            ts = normalize_thresholds(ts, policy.global_threshold)
        norms_all = [np.sqrt(sq) for sq in group_sq]
        scales_all = [clip_scales(nk, t) for nk, t in zip(norms_all, ts)]
        counts = [int(np.count_nonzero(nk <= t)) for nk, t in zip(norms_all, count_ts)]

    states = []
    for k, g in enumerate(model.groups):
        s = scales_all[k]
        grads = []
        for i in g:
            gw, gb = pe[i]
            sw, sb = np.einsum("b,boi->oi", s, gw), s @ gb
            _alloc(sw, sb)
            grads.append((sw, sb))
        states.append(GroupGradState(grads, norms_all[k], counts[k], s))
    for gw, gb in pe:
        _free(gw, gb)
    return states
