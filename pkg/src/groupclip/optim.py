"""DP-SGD / DP-Adam with group-wise clipping fused into backpropagation and
adaptive thresholds driven by private quantile estimation.

One step (``dp_step``):

1. forward pass on the sampled batch;
2. backward pass, clipping and accumulating each group as soon as its output
   gradients are known (or flat clipping, or the materializing oracle);
3. Gaussian noise per group according to the noise plan;
4. parameter update with (clipped sum + noise) / B, B the *nominal* batch size;
5. for adaptive policies, one noisy clip-count update per group, in group order.

The order of random draws is fixed (sampling, gradient noise for groups
0..K-1, count noise for groups 0..K-1) so runs are reproducible and a
checkpoint restores the exact stream.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .clip import (AdaptivePerLayer, ClipPolicy, Flat, FixedPerLayer, ParamGroup, clip_per_group,
                   flat_two_phase, grad_meter, naive_oracle, normalize_thresholds)
from .errors import InputError, NumericError, StateError
from .nn import Model, flatten_grads, forward, loss, param_grads
from .privacy import NoisePlan, draw_noise, make_noise_plan
from .quantile import QuantileEstimator


@dataclass(frozen=True)
class SGD:
    momentum: float = 0.0


@dataclass(frozen=True)
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class Poisson:
    rate: float


@dataclass(frozen=True)
class Fixed:
    size: int


@dataclass(frozen=True)
class LRSchedule:
    base: float
    kind: str = "constant"  # or "linear": decays to zero at ``total``
    total: int = 1

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.base
        if self.kind == "linear":
            return self.base * max(1.0 - t / max(self.total, 1), 1e-12)
        raise InputError(f"unknown schedule {self.kind!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    rule: SGD | Adam
    lr: LRSchedule
    batch: Poisson | Fixed
    steps: int

    def nominal_batch_size(self, n: int) -> float:
        if isinstance(self.batch, Poisson):
            return self.batch.rate * n
        return float(self.batch.size)


@dataclass
class TrainState:
    model: Model
    rng: np.random.Generator
    step: int = 0
    moments: list[list[np.ndarray]] = field(default_factory=list)
    estimators: list[QuantileEstimator] | None = None
    noise_log: list[tuple[str, int, float]] = field(default_factory=list)

    def clone(self) -> "TrainState":
        return copy.deepcopy(self)


@dataclass
class StepInfo:
    step: int
    batch_size: int
    loss: float
    accuracy: float
    thresholds: list[float]
    clipped_fraction: list[float]
    unclipped_fraction: list[float]
    noise_stds: list[float]
    group_norms: list[np.ndarray]
    clip_seconds: float
    peak_grad_bytes: int


def init_state(model: Model, config: OptimizerConfig, seed: int | np.random.Generator,
               policy: ClipPolicy | None = None, nominal_batch: float | None = None) -> TrainState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = model.group_sizes()
    if isinstance(config.rule, Adam):
        moments = [[np.zeros(n) for n in sizes], [np.zeros(n) for n in sizes]]
    elif config.rule.momentum > 0:
        moments = [[np.zeros(n) for n in sizes]]
    else:
        moments = []
    estimators = None
    if isinstance(policy, AdaptivePerLayer):
        if len(policy.thresholds) != model.num_groups:
            raise InputError(f"{len(policy.thresholds)} initial thresholds for {model.num_groups} groups")
        if nominal_batch is None:
            raise InputError("adaptive clipping needs the nominal batch size")
        estimators = [QuantileEstimator(float(c), policy.q, policy.eta, policy.sigma_b, nominal_batch)
                      for c in policy.thresholds]
    return TrainState(model, rng, 0, moments, estimators)


def sample_minibatch(n: int, batch: Poisson | Fixed, rng: np.random.Generator) -> np.ndarray:
    if n <= 0:
        raise InputError("dataset is empty")
    if isinstance(batch, Poisson):
        if not 0.0 <= batch.rate <= 1.0:
            raise InputError(f"sampling rate must lie in [0, 1], got {batch.rate}")
        return np.flatnonzero(rng.random(n) < batch.rate)
    if batch.size > n:
        raise InputError(f"fixed batch size {batch.size} exceeds dataset size {n}")
    return np.sort(rng.choice(n, size=batch.size, replace=False))


def clip_thresholds(state: TrainState, policy: ClipPolicy) -> tuple[list[float], list[float]]:
    """(thresholds used for clipping, thresholds used for counting) per group."""
    K = state.model.num_groups
    if isinstance(policy, FixedPerLayer):
        if len(policy.thresholds) != K:
            raise InputError(f"{len(policy.thresholds)} thresholds for {K} groups")
        ts = [float(c) for c in policy.thresholds]
        return ts, ts
    if isinstance(policy, AdaptivePerLayer):
        if state.estimators is None:
            raise StateError("adaptive policy but no quantile estimators in the train state")
        raw = [e.C for e in state.estimators]
        if policy.global_threshold is not None:
            return normalize_thresholds(raw, policy.global_threshold), raw
        return raw, raw
    if isinstance(policy, Flat):
        return [float(policy.C)] * K, [float(policy.C)] * K
    raise InputError(f"unsupported policy {policy!r}")


def noise_plan_for(model: Model, policy: ClipPolicy, thresholds: Sequence[float], sigma_new: float,
                   strategy: str) -> NoisePlan:
    sizes = model.group_sizes()
    if isinstance(policy, Flat):
        # one group spanning the whole model: same std on every coordinate
        base = make_noise_plan("global", [ParamGroup(0, sum(sizes), policy.C)], sigma_new)
        K = model.num_groups
        return NoisePlan("flat", (1.0,) * K, base.sensitivity, base.stds * K, base.V)
    groups = [ParamGroup(k, n, t) for k, (n, t) in enumerate(zip(sizes, thresholds))]
    return make_noise_plan(strategy, groups, sigma_new)


def _apply_update(state: TrainState, rule: SGD | Adam, lr: float, grads: Sequence[np.ndarray]) -> None:
    model = state.model
    for k, g in enumerate(grads):
        theta = model.get_group_params(k)
        if isinstance(rule, Adam):
            m, v = state.moments[0][k], state.moments[1][k]
            m *= rule.beta1
            m += (1.0 - rule.beta1) * g
            v *= rule.beta2
            v += (1.0 - rule.beta2) * g * g
            t = state.step + 1
            m_hat = m / (1.0 - rule.beta1**t)
            v_hat = v / (1.0 - rule.beta2**t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + rule.eps)
        elif rule.momentum > 0:
            buf = state.moments[0][k]
            buf *= rule.momentum
            buf += g
            theta -= lr * buf
        else:
            theta -= lr * g
        model.set_group_params(k, theta)


def dp_step(state: TrainState, x: np.ndarray, y: np.ndarray, policy: ClipPolicy | None, config: OptimizerConfig,
            *, sigma_new: float, nominal_batch: float, strategy: str = "global", loss_kind: str = "cross_entropy",
            clipper: str = "fused") -> StepInfo:
    """Advance ``state`` by one private step on batch (x, y), in place.

    ``policy=None`` runs a plain, non-private step on the mean loss.
    ``clipper`` selects the clipping path: "fused" (group-wise in backprop, or
    two-phase for a flat policy) or "naive" (materialized oracle).
    """
    model = state.model
    K = model.num_groups
    sizes = model.group_sizes()
    n = len(x)
    if n == 0 and isinstance(config.batch, Fixed):
        raise StateError("empty batch under fixed-size sampling")
    lr = config.lr(state.step)

    if policy is None:
        if n == 0:
            state.step += 1
            return StepInfo(state.step - 1, 0, float("nan"), float("nan"), [math.inf] * K, [0.0] * K,
                            [1.0] * K, [0.0] * K, [], 0.0, 0)
        with grad_meter() as meter:
            logits, tape = forward(model, x)
            value, dlogits = loss(logits, y, loss_kind)
            t0 = time.perf_counter()
            grads = flatten_grads(model, param_grads(model, tape, dlogits))
            clip_s = time.perf_counter() - t0
            grads = [g / n for g in grads]
        _check_finite(grads)
        _apply_update(state, config.rule, lr, grads)
        state.step += 1
        return StepInfo(state.step - 1, n, value, _accuracy(logits, y, loss_kind), [math.inf] * K, [0.0] * K,
                        [1.0] * K, [0.0] * K, [], clip_s, meter.peak)

    clip_ts, count_ts = clip_thresholds(state, policy)
    with grad_meter() as meter:
        if n > 0:
            logits, tape = forward(model, x)
            value, dlogits = loss(logits, y, loss_kind)
            t0 = time.perf_counter()
            if clipper == "naive":
                states = naive_oracle(model, x, y, policy, loss_kind,
                                      thresholds=None if isinstance(policy, Flat) else count_ts,
                                      tape=tape, dlogits=dlogits)
            elif isinstance(policy, Flat):
                states = flat_two_phase(model, tape, dlogits, policy.C)
            else:
                states = clip_per_group(model, tape, dlogits, clip_ts, count_ts)
            clip_s = time.perf_counter() - t0
            sums = [s.flat() for s in states]
            counts = [s.count for s in states]
            norms = [s.norms for s in states]
            clipped = [float(np.mean(s.scales < 1.0)) for s in states]
            acc = _accuracy(logits, y, loss_kind)
        else:
            value, acc, clip_s = float("nan"), float("nan"), 0.0
            sums = [np.zeros(d) for d in sizes]
            counts, norms, clipped = [0] * K, [np.zeros(0)] * K, [0.0] * K

    plan = noise_plan_for(model, policy, clip_ts, sigma_new, strategy)
    noise = draw_noise(plan, sizes, state.rng)
    for k, s in enumerate(plan.stds):
        state.noise_log.append(("grad", k, s))
    private = [(g + z) / nominal_batch for g, z in zip(sums, noise)]
    _check_finite(private)
    _apply_update(state, config.rule, lr, private)

    if isinstance(policy, AdaptivePerLayer):
        new = []
        for k, est in enumerate(state.estimators):
            z = state.rng.standard_normal() * est.sigma_b
            state.noise_log.append(("count", k, est.sigma_b))
            new.append(est.step(counts[k], z))
        state.estimators = new

    state.step += 1
    unclipped = [c / n if n else 0.0 for c in counts]
    return StepInfo(state.step - 1, n, value, acc, list(clip_ts), clipped, unclipped, list(plan.stds), norms,
                    clip_s, meter.peak)


def _check_finite(grads: Sequence[np.ndarray]) -> None:
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in group {k}")


def _accuracy(logits: np.ndarray, y: np.ndarray, loss_kind: str) -> float:
    if loss_kind != "cross_entropy" or len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=-1) == y))


Sink = Callable[[StepInfo], None]


def train(state: TrainState, x: np.ndarray, y: np.ndarray, policy: ClipPolicy | None, config: OptimizerConfig,
          *, sigma_new: float, strategy: str = "global", loss_kind: str = "cross_entropy",
          clipper: str = "fused", sink: Sink | None = None) -> TrainState:
    """Run ``config.steps`` steps from ``state.step`` onward; returns the final state.

    The last iterate is returned; no iterate averaging.
    """
    n = len(x)
    nominal = config.nominal_batch_size(n)
    while state.step < config.steps:
        idx = sample_minibatch(n, config.batch, state.rng)
        info = dp_step(state, x[idx], y[idx], policy, config, sigma_new=sigma_new, nominal_batch=nominal,
                       strategy=strategy, loss_kind=loss_kind, clipper=clipper)
        if sink is not None:
            sink(info)
    return state


def flat_train_reference(state: TrainState, x: np.ndarray, y: np.ndarray, C: float, config: OptimizerConfig,
                         *, sigma_new: float, loss_kind: str = "cross_entropy", clipper: str = "fused",
                         sink: Sink | None = None) -> TrainState:
    """``train`` with flat clipping at a single threshold ``C``."""
    return train(state, x, y, Flat(C), config, sigma_new=sigma_new, loss_kind=loss_kind, clipper=clipper, sink=sink)
