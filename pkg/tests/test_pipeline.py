import csv
import math

import numpy as np
import pytest

from conftest import random_mlp, random_partition
from groupclip.clip import FixedPerLayer, Flat, flat_two_phase
from groupclip.errors import ConfigError, StateError
from groupclip.nn import Model, Linear, forward, loss, mlp
from groupclip.optim import SGD, Fixed, LRSchedule, OptimizerConfig, dp_step, init_state
from groupclip.pipeline import (
    TRACE_COLUMNS, WORKAROUNDS, CommLog, CostModel, DeviceState, PipelineConfig, build_schedule, device_noise_std,
    flat_in_pipeline_step, local_backward, local_forward, makespan, pipeline_step,
)


def random_setup(rng, B=None, J=None):
    model = random_mlp(rng, depth=int(rng.integers(1, 5)), max_width=16)
    part = random_partition(model, rng)
    B = B or int(rng.integers(1, 17))
    J = J or int(rng.integers(1, B + 1))
    C = tuple(float(c) for c in np.exp(rng.uniform(-3, 0, len(part))))
    config = PipelineConfig(part, J, C, float(rng.uniform(0, 2)), float(rng.uniform(0.01, 1)))
    x = rng.standard_normal((B, model.linears[0].in_features))
    y = rng.integers(0, model.linears[-1].out_features, B)
    return model, config, x, y


def params(model):
    return np.concatenate(model.get_params())


# ---------------------------------------------------------------- schedule


def tick_oracle(K, J, fwd, bwd):
    """Step a clock one tick at a time; each device runs its GPipe task list in order."""
    tasks = {k: [("F", j) for j in range(J)] + [("B", j) for j in range(J)] for k in range(K)}
    dur = {"F": fwd, "B": bwd}
    done, start, busy_until = {}, {}, [0] * K
    t = 0
    while len(done) < 2 * K * J:
        for k in range(K):
            if busy_until[k] > t or not tasks[k]:
                continue
            kind, j = tasks[k][0]
            if kind == "F":
                deps = [("F", k - 1, j)] if k > 0 else []
            else:
                deps = [("B", k + 1, j)] if k < K - 1 else [("F", k, J - 1)]
            if all(d in done and done[d] <= t for d in deps):
                tasks[k].pop(0)
                start[(kind, k, j)] = t
                done[(kind, k, j)] = t + dur[kind]
                busy_until[k] = t + dur[kind]
        t += 1
    return start, max(done.values())


@pytest.mark.parametrize("K,J", [(1, 1), (2, 2), (3, 5), (4, 8), (6, 3)])
def test_schedule_matches_tick_oracle(K, J):
    costs = CostModel(forward=1, backward=2, remat=1, sync=1)
    config = PipelineConfig((1,) * K, J, (1.0,) * K, 1.0, 0.1, costs)
    events = build_schedule(config)
    start, end = tick_oracle(K, J, 1, 3)
    got = {(("F" if e.stage == "forward" else "B"), e.device, e.microbatch): e.start for e in events if e.device >= 0}
    assert got == start
    assert makespan(events) == end + costs.sync


def test_single_device_single_microbatch():
    events = [e for e in build_schedule(PipelineConfig((1,), 1, (1.0,), 1.0, 0.1)) if e.stage != "sync"]
    assert [e.stage for e in events] == ["forward", "backward"]


def test_pipelining_overlaps_devices():
    events = build_schedule(PipelineConfig((1, 1), 2, (1.0, 1.0), 1.0, 0.1))
    f = {(e.device, e.microbatch): (e.start, e.end) for e in events if e.stage == "forward"}
    (s0, e0), (s1, e1) = f[(0, 1)], f[(1, 0)]
    assert s0 < e1 and s1 < e0


def test_pipeline_beats_serial():
    c = CostModel()
    events = build_schedule(PipelineConfig((1,) * 4, 8, (1.0,) * 4, 1.0, 0.1, c))
    assert makespan(events) < 4 * 8 * (c.forward + c.remat + c.backward)


def test_events_totally_ordered():
    events = build_schedule(PipelineConfig((1,) * 3, 4, (1.0,) * 3, 1.0, 0.1))
    keys = [(e.start, e.device if e.device >= 0 else 3, e.microbatch) for e in events]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_invalid_partitions(rng):
    with pytest.raises(ConfigError):
        build_schedule(PipelineConfig((), 1, (), 1.0, 0.1))
    with pytest.raises(ConfigError):
        PipelineConfig((2, 0), 1, (1.0, 1.0), 1.0, 0.1).validate()
    model = mlp([3, 4, 2], "relu", rng)
    with pytest.raises(ConfigError, match="no Linear"):
        PipelineConfig((1, 1, 1), 1, (1.0,) * 3, 1.0, 0.1).validate(model)
    with pytest.raises(ConfigError):
        PipelineConfig((1, 1), 1, (1.0,) * 2, 1.0, 0.1).validate(model)


# ---------------------------------------------------------------- device operations


def test_identity_chunk_forward():
    model = Model([Linear(np.eye(3), np.zeros(3))])
    dev = DeviceState(0, 0, 1, 1.0, np.zeros(12))
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(local_forward(model, dev, 0, x, CommLog(), 1), x)


def test_chunked_forward_composes(rng):
    for _ in range(10):
        model, config, x, _ = random_setup(rng)
        log = CommLog()
        h = x
        for k, (lo, hi) in enumerate(config.bounds()):
            h = local_forward(model, DeviceState(k, lo, hi, 1.0, np.zeros(1)), 0, h, log, config.K)
        assert np.allclose(h, forward(model, x)[0], atol=1e-12)
        assert log.forward_messages == config.K - 1


def test_backward_without_stored_activation(rng):
    model = mlp([3, 2], "relu", rng)
    with pytest.raises(StateError):
        local_backward(model, DeviceState(0, 0, 1, 1.0, np.zeros(8)), 0, np.array([0]), CommLog(), 1)


def test_noiseless_unclipped_accumulator_is_plain_gradient(rng):
    model, config, x, y = random_setup(rng, B=6, J=3)
    cfg = PipelineConfig(config.partition, 3, (math.inf,) * config.K, 0.0, 1.0)
    res = pipeline_step(cfg, model, x, y, np.random.default_rng(0))
    grouped = model.regroup(cfg.groups(model))
    logits, tape = forward(grouped, x)
    _, dl = loss(logits, y)
    plain = flat_two_phase(grouped, tape, dl, math.inf)
    for upd, st_ in zip(res.updates, plain):
        assert np.allclose(upd * len(x), st_.flat(), atol=1e-12)


def test_device_noise_std_example():
    assert device_noise_std(1.0, 4, 0.1) == pytest.approx(0.2, rel=1e-15)


def test_noise_std_is_local():
    # the std only sees (sigma, K, own threshold); other devices' thresholds cannot enter
    a = device_noise_std(1.3, 3, 0.5)
    for others in [(1e-5, 1e5), (7.0, 7.0)]:
        config = PipelineConfig((1, 1, 1), 2, (0.5, *others), 1.3, 0.1)
        assert device_noise_std(config.sigma, config.K, config.thresholds[0]) == a


def test_noise_added_once_regardless_of_J(rng):
    model, config, x, y = random_setup(rng, B=8, J=1)
    for J in (1, 2, 8):
        cfg = PipelineConfig(config.partition, J, config.thresholds, 1.0, 0.1)
        from groupclip import pipeline as pl

        counts = []
        orig = pl._finish

        def spy(config, work, devices, n, log, events):
            counts.append([d.noise_draws for d in devices])
            return orig(config, work, devices, n, log, events)

        pl._finish = spy
        try:
            pipeline_step(cfg, model, x, y, np.random.default_rng(0))
        finally:
            pl._finish = orig
        assert counts == [[1] * cfg.K]


# ---------------------------------------------------------------- equivalences


def test_per_device_equals_single_device_equal_budget():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(40):
        model, config, x, y = random_setup(rng)
        res = pipeline_step(config, model, x, y, np.random.default_rng(77))
        single = model.copy().regroup(config.groups(model))
        ocfg = OptimizerConfig(SGD(), LRSchedule(config.lr), Fixed(len(x)), 1)
        state = init_state(single, ocfg, 77)
        dp_step(state, x, y, FixedPerLayer(config.thresholds), ocfg, sigma_new=config.sigma,
                nominal_batch=len(x), strategy="equal_budget")
        worst = max(worst, float(np.max(np.abs(params(res.model) - params(state.model)))))
        assert res.comm.norm_messages == 0 and res.comm.syncs == 1
    assert worst <= 1e-10


def test_update_invariant_to_microbatches(rng):
    model, config, x, y = random_setup(rng, B=16, J=1)
    base = None
    for J in (1, 2, 4, 8):
        cfg = PipelineConfig(config.partition, J, config.thresholds, config.sigma, config.lr)
        upd = np.concatenate(pipeline_step(cfg, model, x, y, np.random.default_rng(5)).updates)
        base = upd if base is None else base
        assert np.max(np.abs(upd - base)) <= 1e-10


def test_flat_in_pipeline_equals_single_device_flat(rng):
    for _ in range(10):
        model, config, x, y = random_setup(rng)
        for w in WORKAROUNDS:
            res = flat_in_pipeline_step(config, model, x, y, np.random.default_rng(2), w)
            single = model.copy().regroup(config.groups(model))
            ocfg = OptimizerConfig(SGD(), LRSchedule(config.lr), Fixed(len(x)), 1)
            state = init_state(single, ocfg, 2)
            dp_step(state, x, y, Flat(config.flat_C()), ocfg, sigma_new=config.sigma, nominal_batch=len(x))
            assert np.max(np.abs(params(res.model) - params(state.model))) <= 1e-10


def test_communication_counts(rng):
    model = mlp([6, 8, 8, 8, 3], "relu", rng)
    x, y = rng.standard_normal((16, 6)), rng.integers(0, 3, 16)
    for J in (1, 2, 4, 8):
        config = PipelineConfig((2, 2, 2, 1), J, (0.5,) * 4, 1.0, 0.1)
        per = pipeline_step(config, model, x, y, np.random.default_rng(0)).comm
        assert (per.syncs, per.norm_messages) == (1, 0)
        assert per.forward_messages == per.backward_messages == J * 3
        for w in WORKAROUNDS:
            flat = flat_in_pipeline_step(config, model, x, y, np.random.default_rng(0), w).comm
            assert (flat.syncs, flat.norm_messages) == (J, J * 4)
            if J >= 2:
                assert flat.makespan > per.makespan


def test_conservation_bound(rng):
    for _ in range(20):
        model, config, x, y = random_setup(rng, B=1, J=1)
        cfg = PipelineConfig(config.partition, 1, config.thresholds, 0.0, 1.0)
        u = np.concatenate(pipeline_step(cfg, model, x, y, np.random.default_rng(0)).updates)
        assert np.linalg.norm(u) <= math.sqrt(sum(c * c for c in cfg.thresholds)) * (1 + 1e-12)


def test_trace_csv(tmp_path, rng):
    model, config, x, y = random_setup(rng, B=8, J=2)
    res = pipeline_step(config, model, x, y, np.random.default_rng(0))
    res.comm.to_csv(tmp_path / "commlog.csv")
    with open(tmp_path / "commlog.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == TRACE_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == list(range(len(res.comm.events)))
    assert [float(r[1]) for r in rows[1:]] == sorted(float(r[1]) for r in rows[1:])
