"""Command-line entry point: ``groupclip <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import GroupClipError
from ..pipeline import WORKAROUNDS, PipelineConfig, flat_in_pipeline_step, pipeline_step
from ..privacy import PrivacySpec, budget_fraction
from .bench import BENCH_MODES, format_bench, run_bench
from .compare import compare, format_table
from .config import MODES, RunConfig, load_config, with_overrides
from .run import build_dataset, build_model, run_training


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--target-quantile", type=float)
    # None means "keep the config value"; without a config these resolve to 0.3 and 0.01
    p.add_argument("--quantile-lr", type=float, help="quantile learning rate (default 0.3)")
    p.add_argument("--budget-fraction", type=float, help="share of the budget spent on counts (default 0.01)")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    return with_overrides(cfg, seed=args.seed, mode=args.mode, out=str(args.out) if args.out else None,
                          epsilon=args.epsilon, delta=args.delta, target_quantile=args.target_quantile,
                          quantile_lr=args.quantile_lr, budget_fraction=args.budget_fraction)


def cmd_calibrate(args) -> int:
    if args.steps is None and args.epochs is None:
        raise GroupClipError("give --steps or --epochs")
    steps = args.steps if args.steps is not None else math.ceil(args.epochs / args.rate)
    spec = PrivacySpec.resolve(rate=args.rate, steps=steps, K=args.groups,
                               epsilon=args.epsilon if args.epsilon is not None else 3.0,
                               delta=args.delta if args.delta is not None else 1e-5,
                               budget_fraction=args.budget_fraction if args.budget_fraction is not None else 0.01)
    r = budget_fraction(spec.sigma, spec.sigma_b, args.groups) if math.isfinite(spec.sigma_b) else 0.0
    print(f"epsilon={spec.epsilon} delta={spec.delta} rate={spec.rate:.6g} steps={steps} K={args.groups}")
    print(f"sigma={spec.sigma:.6f}")
    print(f"sigma_new={spec.sigma_new:.6f}")
    print(f"sigma_b={spec.sigma_b:.6f}")
    print(f"r={r:.6g}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out)
    res = run_training(cfg, out)
    print(f"wrote {out}/metrics.csv, norms.csv, checkpoint.bin, config.ini")
    print(f"test accuracy {res.test_accuracy * 100:.2f}%")
    if res.spec is not None:
        print(f"sigma={res.spec.sigma:.6f} sigma_new={res.spec.sigma_new:.6f} sigma_b={res.spec.sigma_b:.6f}")
    return 0


def cmd_bench(args) -> int:
    widths = tuple(int(w) for w in args.widths.split(","))
    rows = run_bench(widths, args.batch, steps=args.steps, warmup=args.warmup, modes=args.modes, seed=args.seed or 0)
    print(f"MLP {'-'.join(map(str, widths))}, B={args.batch}, median of {args.steps} steps after {args.warmup} warmup")
    print(format_bench(rows))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "median_ms", "steps_per_s", "peak_grad_bytes", "peak_cached_bytes"])
            for r in rows:
                w.writerow([r.mode, repr(r.median_ms), repr(r.steps_per_s), r.peak_grad_bytes, r.peak_cached_bytes])
    return 0


def default_partition(n_layers: int) -> tuple[int, ...]:
    """One Linear layer (plus its activation) per device."""
    K = (n_layers + 1) // 2
    return tuple([2] * (K - 1) + [n_layers - 2 * (K - 1)])


def cmd_pipeline_sim(args) -> int:
    cfg = _run_config(args)
    model = build_model(cfg)
    sec = cfg.pipeline
    partition = sec.partition if sec and sec.partition else default_partition(len(model.layers))
    K = len(partition)
    thresholds = sec.thresholds if sec and sec.thresholds else (cfg.privacy.clip_norm / math.sqrt(K),) * K
    pcfg = PipelineConfig(partition, args.microbatches or (sec.microbatches if sec else 4), tuple(thresholds),
                          sec.sigma if sec else 1.0, sec.lr if sec else 0.1)
    batch = sec.batch_size if sec else 64
    data = build_dataset(replace(cfg, task=replace(cfg.task, n=max(batch, 1), n_test=0)))
    x, y = data.x[:batch], data.y[:batch]
    rng_seed = cfg.seed
    runs = [("per-device", pipeline_step(pcfg, model, x, y, np.random.default_rng(rng_seed)))]
    for w in WORKAROUNDS:
        runs.append((f"flat-{w}", flat_in_pipeline_step(pcfg, model, x, y, np.random.default_rng(rng_seed), w)))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    runs[0][1].comm.to_csv(out / "commlog.csv")
    for name, res in runs[1:]:
        res.comm.to_csv(out / f"commlog-{name}.csv")
    print(f"K={K} devices, J={pcfg.microbatches} microbatches, B={batch}")
    print(f"{'mode':<20}{'makespan':>10}{'syncs':>7}{'norm msgs':>11}{'fwd msgs':>10}{'bwd msgs':>10}")
    for name, res in runs:
        c = res.comm
        print(f"{name:<20}{c.makespan:>10.2f}{c.syncs:>7}{c.norm_messages:>11}{c.forward_messages:>10}"
              f"{c.backward_messages:>10}")
    print(f"wrote {out}/commlog.csv")
    return 0


def cmd_compare(args) -> int:
    cfg = _run_config(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    results = compare(cfg, seeds, args.modes, workers=args.workers)
    print(format_table(results))
    if args.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "seed", "test_accuracy"])
            for mode, rs in results.items():
                for r in rs:
                    w.writerow([mode, r.seed, repr(r.test_accuracy)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="groupclip", description="Private training with group-wise gradient clipping")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="noise multiplier for a privacy target")
    _common(c)
    c.add_argument("--rate", type=float, required=True, help="sampling rate B/N")
    c.add_argument("--steps", type=int)
    c.add_argument("--epochs", type=float)
    c.add_argument("--groups", "-K", type=int, default=1)
    c.set_defaults(fn=cmd_calibrate)

    t = sub.add_parser("train", help="train from a config file")
    _common(t)
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench", help="clipping-mode time and memory table")
    _common(b)
    b.add_argument("--widths", default="512,512,512,10")
    b.add_argument("--batch", type=int, default=256)
    b.add_argument("--steps", type=int, default=100)
    b.add_argument("--warmup", type=int, default=20)
    b.add_argument("--modes", nargs="+", choices=BENCH_MODES, default=list(BENCH_MODES))
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("pipeline-sim", help="per-device vs flat clipping in a simulated pipeline")
    _common(s)
    s.add_argument("--microbatches", type=int)
    s.set_defaults(fn=cmd_pipeline_sim)

    m = sub.add_parser("compare", help="multi-seed accuracy table across clipping modes")
    _common(m)
    m.add_argument("--seeds", type=int, default=3)
    m.add_argument("--modes", nargs="+", choices=MODES, default=["adaptive-perlayer", "fixed-perlayer", "flat"])
    m.add_argument("--workers", type=int, help="defaults to GROUPCLIP_THREADS (or 1)")
    m.set_defaults(fn=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (GroupClipError, OSError) as exc:
        print(f"groupclip {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
