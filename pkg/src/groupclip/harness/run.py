"""Build and run a training job from a ``RunConfig``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..clip import AdaptivePerLayer, Flat, FixedPerLayer
from ..nn import Model, forward, mlp
from ..optim import SGD, Adam, Fixed, LRSchedule, OptimizerConfig, Poisson, TrainState, init_state, train
from ..privacy import PrivacySpec
from .config import RunConfig, dump_config
from .data import Dataset, SyntheticSpec, gen_synthetic, load_idx_dataset
from .telemetry import CsvSink, emit_telemetry


def _seeds(seed: int) -> tuple[int, int, int]:
    data, model, run = np.random.SeedSequence(seed).spawn(3)
    return tuple(int(s.generate_state(1)[0]) for s in (data, model, run))


def build_dataset(cfg: RunConfig) -> Dataset:
    t = cfg.task
    if t.kind == "idx":
        return load_idx_dataset(t.train_images, t.train_labels, t.test_images, t.test_labels)
    spec = SyntheticSpec(t.n, t.n_test, t.classes, t.dim, t.separation, t.kind == "drift", t.scale_spread)
    return gen_synthetic(spec, _seeds(cfg.seed)[0])


def build_model(cfg: RunConfig) -> Model:
    return mlp(cfg.model.widths, cfg.model.activation, np.random.default_rng(_seeds(cfg.seed)[1]))


def optimizer_config(cfg: RunConfig, n: int) -> OptimizerConfig:
    o = cfg.optim
    rule = Adam(o.beta1, o.beta2) if o.rule == "adam" else SGD(o.momentum)
    batch = Poisson(o.batch_size / n) if o.batch == "poisson" else Fixed(o.batch_size)
    return OptimizerConfig(rule, LRSchedule(o.lr, o.schedule, o.steps), batch, o.steps)


def resolve_privacy(cfg: RunConfig, n: int, K: int) -> PrivacySpec | None:
    if cfg.mode == "nonprivate":
        return None
    p = cfg.privacy
    r = p.budget_fraction if cfg.mode == "adaptive-perlayer" else 0.0
    return PrivacySpec.resolve(rate=cfg.optim.batch_size / n, steps=cfg.optim.steps, K=K, epsilon=p.epsilon,
                               delta=p.delta, sigma=p.sigma, budget_fraction=r)


def build_policy(cfg: RunConfig, K: int, spec: PrivacySpec | None):
    p = cfg.privacy
    per_layer = p.thresholds or (p.clip_norm / math.sqrt(K),) * K
    if cfg.mode == "flat":
        return Flat(p.clip_norm)
    if cfg.mode == "fixed-perlayer":
        return FixedPerLayer(tuple(per_layer))
    if cfg.mode == "adaptive-perlayer":
        sigma_b = spec.sigma_b if spec is not None and math.isfinite(spec.sigma_b) else 0.0
        return AdaptivePerLayer(p.target_quantile, p.quantile_lr, sigma_b, tuple(per_layer),
                                global_threshold=p.clip_norm)
    return None


@dataclass
class RunResult:
    state: TrainState
    spec: PrivacySpec | None
    test_accuracy: float
    steps_per_epoch: int
    norm_rows: list


def accuracy(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = forward(model, x)
    return float(np.mean(np.argmax(logits, axis=-1) == y))


def run_training(cfg: RunConfig, out_dir: str | Path | None = None, dataset: Dataset | None = None) -> RunResult:
    """Train per ``cfg``. With ``out_dir``, writes metrics.csv, norms.csv,
    checkpoint.bin and the resolved config.ini there."""
    data = dataset if dataset is not None else build_dataset(cfg)
    model = build_model(cfg)
    K = model.num_groups
    n = data.n
    spec = resolve_privacy(cfg, n, K)
    policy = build_policy(cfg, K, spec)
    ocfg = optimizer_config(cfg, n)
    nominal = ocfg.nominal_batch_size(n)
    state = init_state(model, ocfg, _seeds(cfg.seed)[2], policy, nominal)
    steps_per_epoch = max(1, math.ceil(n / cfg.optim.batch_size))
    sigma_new = spec.sigma_new if spec is not None else 0.0
    norm_rows: list = []
    if out_dir is not None:
        out = Path(out_dir)
        with CsvSink(out, K, steps_per_epoch, cfg.record_timing) as sink:
            train(state, data.x, data.y, policy, ocfg, sigma_new=sigma_new, strategy=cfg.privacy.strategy, sink=sink)
            norm_rows = sink.norm_rows
        checkpoint.save(state, out / "checkpoint.bin")
        (out / "config.ini").write_text(dump_config(cfg))
    else:
        def sink(info):
            emit_telemetry(norm_rows, info.step, info.group_norms)

        train(state, data.x, data.y, policy, ocfg, sigma_new=sigma_new, strategy=cfg.privacy.strategy, sink=sink)
    return RunResult(state, spec, accuracy(state.model, data.x_test, data.y_test), steps_per_epoch, norm_rows)
