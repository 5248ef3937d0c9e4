"""Run configuration: an INI document with a mandatory ``version``.

Example::

    [run]
    version = 1
    seed = 0
    mode = adaptive-perlayer      ; flat | fixed-perlayer | adaptive-perlayer | nonprivate

    [task]
    kind = drift                  ; synthetic | drift | idx
    n = 10000
    n_test = 2000

    [model]
    widths = 32, 64, 16, 16, 16, 16, 16, 16, 10
    activation = tanh

    [privacy]
    epsilon = 3
    delta = 1e-5                  ; or: sigma = 1.1 (exactly one of the two forms)
    clip_norm = 10
    budget_fraction = 0.01
    target_quantile = 0.5
    quantile_lr = 0.3
    strategy = global

    [optim]
    rule = sgd
    lr = 0.1
    batch = poisson
    batch_size = 256
    steps = 400

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..privacy import STRATEGIES
from .data import DRIFT_ACTIVATION, DRIFT_WIDTHS

SCHEMA_VERSION = 1
MODES = ("flat", "fixed-perlayer", "adaptive-perlayer", "nonprivate")


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "drift"
    n: int = 10000
    n_test: int = 2000
    classes: int = 10
    dim: int = 32
    separation: float = 5.0
    scale_spread: float = 1.5
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, ...] = DRIFT_WIDTHS
    activation: str = DRIFT_ACTIVATION


@dataclass(frozen=True)
class PrivacyConfig:
    epsilon: float | None = 3.0
    delta: float | None = 1e-5
    sigma: float | None = None
    clip_norm: float = 10.0
    budget_fraction: float = 0.01
    target_quantile: float = 0.5
    quantile_lr: float = 0.3
    strategy: str = "global"
    thresholds: tuple[float, ...] = ()  # initial / fixed per-group thresholds; default C/sqrt(K)


@dataclass(frozen=True)
class OptimConfig:
    rule: str = "sgd"
    lr: float = 0.1
    schedule: str = "constant"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    batch: str = "poisson"
    batch_size: int = 256
    steps: int = 400


@dataclass(frozen=True)
class PipelineSection:
    partition: tuple[int, ...] = ()
    microbatches: int = 4
    thresholds: tuple[float, ...] = ()
    sigma: float = 1.0
    lr: float = 0.1
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    mode: str = "adaptive-perlayer"
    out: str = "runs/default"
    record_timing: bool = False
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pipeline: PipelineSection | None = None

    def validate(self) -> "RunConfig":
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {self.version}; expected {SCHEMA_VERSION}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.task.kind not in ("synthetic", "drift", "idx"):
            raise ConfigError(f"unknown task kind {self.task.kind!r}")
        if self.task.kind == "idx" and not all((self.task.train_images, self.task.train_labels,
                                                 self.task.test_images, self.task.test_labels)):
            raise ConfigError("idx tasks need train_images, train_labels, test_images and test_labels")
        if len(self.model.widths) < 2 or any(w < 1 for w in self.model.widths):
            raise ConfigError(f"bad model widths {self.model.widths}")
        if self.task.kind != "idx" and (self.model.widths[0] != self.task.dim
                                        or self.model.widths[-1] != self.task.classes):
            raise ConfigError(f"model widths {self.model.widths} do not fit a task with dim {self.task.dim} "
                              f"and {self.task.classes} classes")
        if self.model.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.model.activation!r}")
        p = self.privacy
        if self.mode != "nonprivate":
            has_sigma = p.sigma is not None
            has_eps = p.epsilon is not None
            if has_sigma == has_eps:
                raise ConfigError("privacy needs exactly one of: sigma, or epsilon with delta")
            if has_eps and (p.delta is None or not 0 < p.delta < 1 or not p.epsilon > 0):
                raise ConfigError("epsilon must be > 0 and delta in (0, 1)")
            if has_sigma and p.sigma < 0:
                raise ConfigError("sigma must be >= 0")
        if not p.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not 0 <= p.budget_fraction < 1:
            raise ConfigError("budget_fraction must lie in [0, 1)")
        if self.mode == "adaptive-perlayer" and p.budget_fraction == 0 and (p.sigma or 0) > 0:
            raise ConfigError("adaptive clipping with noise needs budget_fraction > 0")
        if not 0 < p.target_quantile < 1 or not p.quantile_lr > 0:
            raise ConfigError("target_quantile must lie in (0, 1) and quantile_lr must be positive")
        if p.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        K = len(self.model.widths) - 1
        if p.thresholds and (len(p.thresholds) != K or any(not t > 0 for t in p.thresholds)):
            raise ConfigError(f"need {K} positive thresholds, got {p.thresholds}")
        o = self.optim
        if o.rule not in ("sgd", "adam") or o.batch not in ("poisson", "fixed") or o.schedule not in ("constant", "linear"):
            raise ConfigError(f"bad optim section {o}")
        if not o.lr > 0 or o.batch_size < 1 or o.steps < 0 or o.momentum < 0:
            raise ConfigError("lr must be > 0, batch_size >= 1, steps >= 0, momentum >= 0")
        if o.batch_size > self.task.n and self.task.kind != "idx":
            raise ConfigError(f"batch_size {o.batch_size} exceeds dataset size {self.task.n}")
        return self


def _convert(raw: str, typ: Any, where: str):
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ in ("bool", bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in ("float | None", "int | None"):
            return None if raw.strip().lower() in ("", "none") else float(raw)
        if typ == "tuple[int, ...]":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if typ == "tuple[float, ...]":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from exc


def _section(cls, items: dict[str, str], name: str):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        kwargs[key] = _convert(raw, known[key], f"[{name}] {key}")
    return cls(**kwargs)


_SECTIONS = {"task": TaskConfig, "model": ModelConfig, "privacy": PrivacyConfig, "optim": OptimConfig,
             "pipeline": PipelineSection}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(cp.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    if "run" not in cp or "version" not in cp["run"]:
        raise ConfigError("config must contain [run] with a version key")
    run_kwargs = {}
    run_types = {"version": int, "seed": int, "mode": str, "out": str, "record_timing": bool}
    for key, raw in cp["run"].items():
        if key not in run_types:
            raise ConfigError(f"unknown key {key!r} in [run]")
        run_kwargs[key] = _convert(raw, run_types[key], f"[run] {key}")
    for name, cls in _SECTIONS.items():
        if name in cp:
            run_kwargs[name] = _section(cls, dict(cp[name]), name)
    return RunConfig(**run_kwargs).validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    d = asdict(cfg)
    cp["run"] = {k: _render(d[k]) for k in ("version", "seed", "mode", "out", "record_timing")}
    for name in _SECTIONS:
        if d.get(name) is not None:
            cp[name] = {k: _render(v) for k, v in d[name].items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """Apply CLI-style overrides (None values are ignored)."""
    run_kw = {k: v for k, v in kw.items() if k in ("seed", "mode", "out") and v is not None}
    priv = {}
    if kw.get("epsilon") is not None:
        priv.update(epsilon=kw["epsilon"], sigma=None)
        if cfg.privacy.delta is None and kw.get("delta") is None:
            priv["delta"] = 1e-5
    for key, name in (("delta", "delta"), ("target_quantile", "target_quantile"),
                      ("quantile_lr", "quantile_lr"), ("budget_fraction", "budget_fraction")):
        if kw.get(key) is not None:
            priv[name] = kw[key]
    new = replace(cfg, **run_kw)
    if priv:
        new = replace(new, privacy=replace(new.privacy, **priv))
    return new.validate()
