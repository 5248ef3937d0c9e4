import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_batch, random_mlp
from groupclip import kernels
from groupclip.clip import (
    AdaptivePerLayer, FixedPerLayer, Flat, ParamGroup, clip_per_group, clip_scale, clip_scales, flat_two_phase,
    fused_clipped_sum, ghost_norm_parts, ghost_norms, grad_meter, naive_oracle, normalize_thresholds,
)
from groupclip.errors import DimensionError, InputError, StateError
from groupclip.nn import backward_per_layer, forward, loss, mlp


def loop_per_example(model, x, y):
    """Independent oracle: one forward/backward per example, outer products by hand."""
    out = []
    for i in range(len(x)):
        logits, tape = forward(model, x[i : i + 1])
        _, dl = loss(logits, y[i : i + 1])
        grads = {}

        def visit(j, a, e):
            a2, e2 = a[0].reshape(-1, a.shape[-1]), e[0].reshape(-1, e.shape[-1])
            grads[j] = (e2.T @ a2, e2.sum(axis=0))

        backward_per_layer(model, tape, dl, visit)
        out.append([grads[j] for j in range(len(model.linears))])
    return out


def group_vectors(model, per_example):
    """Per example, per group: the flat gradient vector."""
    return [[np.concatenate([np.concatenate([g[j][0].ravel(), g[j][1]]) for j in grp]) for grp in model.groups]
            for g in per_example]


def reference_clip(model, x, y, thresholds=None, flat_C=None):
    vecs = group_vectors(model, loop_per_example(model, x, y))
    sums = [np.zeros(d) for d in model.group_sizes()]
    for v in vecs:
        if flat_C is not None:
            total = math.sqrt(sum(float(g @ g) for g in v))
            s = [clip_scale(total, flat_C)] * len(v)
        else:
            s = [clip_scale(float(np.linalg.norm(g)), c) for g, c in zip(v, thresholds)]
        for k, g in enumerate(v):
            sums[k] += s[k] * g
    return sums


def flat_sums(states):
    return [s.flat() for s in states]


def setup(model, x, y):
    logits, tape = forward(model, x)
    _, dl = loss(logits, y)
    return tape, dl


# ---------------------------------------------------------------- ghost norms


def test_ghost_norm_2d_example():
    w, b = ghost_norm_parts(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]))
    assert (w[0], b[0]) == (4.0, 4.0)
    assert ghost_norms(np.array([[1.0, 0.0]]), np.array([[2.0, 0.0]]))[0] == 8.0


def test_ghost_norm_zero_output_gradient():
    assert ghost_norms(np.ones((1, 3)), np.zeros((1, 2)))[0] == 0.0


def test_ghost_norm_sequence_example():
    a = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    w, _ = ghost_norm_parts(a, a.copy())
    assert w[0] == pytest.approx(2.0, abs=1e-15)


@pytest.mark.parametrize("seq", [None, 5])
def test_ghost_norms_exact_against_materialized(rng, seq):
    shape = (7, seq) if seq else (7,)
    a = rng.standard_normal(shape + (6,))
    e = rng.standard_normal(shape + (4,))
    gw, gb = kernels.materialize_np(a, e)
    direct = np.einsum("boi,boi->b", gw, gw) + np.einsum("bo,bo->b", gb, gb)
    assert np.allclose(ghost_norms(a, e), direct, rtol=1e-12, atol=0)


@pytest.mark.parametrize("seq", [None, 4])
def test_numba_and_numpy_kernels_agree(rng, seq):
    shape = (9, seq) if seq else (9,)
    a, e = rng.standard_normal(shape + (5,)), rng.standard_normal(shape + (3,))
    ghost_np, ghost_nb = (kernels.ghost_sq_seq_np, kernels.ghost_sq_seq_nb) if seq else (
        kernels.ghost_sq_2d_np, kernels.ghost_sq_2d_nb)
    for u, v in zip(ghost_np(a, e), ghost_nb(a, e)):
        assert np.allclose(u, v, rtol=1e-12, atol=0)
    for u, v in zip(kernels.materialize_np(a, e), kernels.materialize_nb(a, e)):
        assert np.allclose(u, v, rtol=1e-14, atol=0)


def test_ghost_norm_dimension_error():
    with pytest.raises(DimensionError):
        ghost_norms(np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        ghost_norms(np.ones((3, 2, 2)), np.ones((3, 3, 2)))


# ---------------------------------------------------------------- scales and sums


@pytest.mark.parametrize("norm,C,expected", [(2.0, 1.0, 0.5), (0.5, 1.0, 1.0), (0.0, 1.0, 1.0)])
def test_clip_scale_examples(norm, C, expected):
    assert clip_scale(norm, C) == expected
    assert clip_scales(np.array([norm]), C)[0] == expected


def test_infinite_threshold_never_clips():
    assert clip_scale(1e300, math.inf) == 1.0


def test_fused_sum_unit_scales_is_plain_gradient(rng):
    a, e = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    gw, gb = fused_clipped_sum(a, e, np.ones(6))
    assert np.allclose(gw, e.T @ a, atol=1e-13) and np.allclose(gb, e.sum(0), atol=1e-13)


def test_fused_sum_half_scale_single_example(rng):
    a, e = rng.standard_normal((1, 4)), rng.standard_normal((1, 3))
    gw, gb = fused_clipped_sum(a, e, np.array([0.5]))
    assert np.array_equal(gw, 0.5 * np.outer(e[0], a[0]))
    assert np.array_equal(gb, 0.5 * e[0])


@pytest.mark.parametrize("seq", [None, 3])
def test_fused_sum_matches_materialization(rng, seq):
    shape = (8, seq) if seq else (8,)
    a, e = rng.standard_normal(shape + (5,)), rng.standard_normal(shape + (4,))
    s = rng.uniform(0.05, 1.0, 8)
    gw, gb = fused_clipped_sum(a, e, s)
    mw, mb = kernels.materialize_np(a, e)
    assert np.allclose(gw, np.einsum("b,boi->oi", s, mw), atol=1e-10)
    assert np.allclose(gb, s @ mb, atol=1e-10)


def test_fused_sum_wrong_scale_count(rng):
    with pytest.raises(DimensionError):
        fused_clipped_sum(np.ones((3, 2)), np.ones((3, 2)), np.ones(2))


# ---------------------------------------------------------------- thresholds


def test_normalize_equal_thresholds():
    assert normalize_thresholds([1.0] * 4, 1.0) == pytest.approx([0.5] * 4, abs=1e-15)


def test_normalize_single_group():
    assert normalize_thresholds([0.37], 2.5) == pytest.approx([2.5], abs=1e-15)


def test_normalize_three_four():
    assert normalize_thresholds([3.0, 4.0], 10.0) == pytest.approx([6.0, 8.0], abs=1e-14)


def test_normalize_rejects_all_zero():
    with pytest.raises(InputError):
        normalize_thresholds([0.0, 0.0], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=12), st.floats(1e-3, 1e3))
def test_normalized_thresholds_have_global_norm(ts, C):
    out = np.array(normalize_thresholds(ts, C))
    assert math.sqrt(float(out @ out)) == pytest.approx(C, rel=1e-12)
    assert np.allclose(out / np.array(ts), out[0] / ts[0], rtol=1e-12)


def test_param_group_validation():
    ParamGroup(0, 3, 1.0, 2.0)
    for bad in [dict(size=0), dict(threshold=0.0), dict(weight=-1.0)]:
        kw = dict(k=0, size=3, threshold=1.0, weight=1.0) | bad
        with pytest.raises(InputError):
            ParamGroup(**kw)


def test_policy_validation():
    with pytest.raises(InputError):
        FixedPerLayer((1.0, -1.0))
    with pytest.raises(InputError):
        AdaptivePerLayer(1.0, 0.3, 0.0, (1.0,))
    with pytest.raises(InputError):
        AdaptivePerLayer(0.5, 0.0, 0.0, (1.0,))


# ---------------------------------------------------------------- paths vs oracles


def test_flat_two_phase_infinite_threshold(rng):
    model = random_mlp(rng, depth=3)
    x, y = random_batch(rng, model, 5)
    tape, dl = setup(model, x, y)
    plain = reference_clip(model, x, y, thresholds=[math.inf] * model.num_groups)
    for got, want in zip(flat_sums(flat_two_phase(model, tape, dl, math.inf)), plain):
        assert np.allclose(got, want, atol=1e-12)


def test_flat_two_phase_halves_single_example(rng):
    model = random_mlp(rng, depth=3)
    x, y = random_batch(rng, model, 1)
    tape, dl = setup(model, x, y)
    vecs = group_vectors(model, loop_per_example(model, x, y))[0]
    total = math.sqrt(sum(float(v @ v) for v in vecs))
    states = flat_two_phase(model, tape, dl, total / 2)
    for got, v in zip(flat_sums(states), vecs):
        assert np.allclose(got, 0.5 * v, atol=1e-12)


def test_flat_two_phase_incomplete_tape(rng):
    model = mlp([3, 4, 2], "relu", rng)
    _, tape = forward(model, rng.standard_normal((2, 3)))
    tape.inputs = tape.inputs[1:]
    with pytest.raises(StateError):
        flat_two_phase(model, tape, np.zeros((2, 2)), 1.0)


def test_naive_oracle_plain_gradient_for_single_example(rng):
    model = random_mlp(rng, depth=2)
    x, y = random_batch(rng, model, 1)
    plain = reference_clip(model, x, y, thresholds=[math.inf] * model.num_groups)
    for got, want in zip(flat_sums(naive_oracle(model, x, y, Flat(math.inf))), plain):
        assert np.allclose(got, want, atol=1e-12)


def test_naive_oracle_tiny_threshold_dominates(rng):
    model = random_mlp(rng, depth=3)
    x, y = random_batch(rng, model, 6)
    eps = 1e-9
    ts = [1.0] * model.num_groups
    ts[1] = eps
    states = naive_oracle(model, x, y, FixedPerLayer(tuple(ts)))
    assert np.linalg.norm(states[1].flat()) <= len(x) * eps * (1 + 1e-9)


def random_policy(rng, K):
    kind = int(rng.integers(3))
    ts = tuple(float(t) for t in np.exp(rng.uniform(-3, 1, K)))
    if kind == 0:
        return FixedPerLayer(ts)
    if kind == 1:
        return AdaptivePerLayer(0.5, 0.3, 0.0, ts)
    return AdaptivePerLayer(0.5, 0.3, 0.0, ts, global_threshold=float(np.exp(rng.uniform(-2, 1))))


def test_fused_and_two_phase_match_oracles_on_many_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for n in range(120):
        model = random_mlp(rng, max_width=64 if n % 10 == 0 else 16)
        seq = 3 if n % 7 == 0 else None
        x, y = random_batch(rng, model, int(rng.integers(1, 33)), seq=seq)
        if n % 5 == 0 and len(model.linears) >= 2:
            model = model.regroup([(0, 1)] + [(i,) for i in range(2, len(model.linears))])
        tape, dl = setup(model, x, y)
        K = model.num_groups
        policy = random_policy(rng, K)
        clip_ts = list(policy.thresholds)
        if isinstance(policy, AdaptivePerLayer) and policy.global_threshold is not None:
            clip_ts = normalize_thresholds(clip_ts, policy.global_threshold)
        fused = clip_per_group(model, tape, dl, clip_ts, policy.thresholds)
        oracle = naive_oracle(model, x, y, policy)
        independent = reference_clip(model, x, y, thresholds=clip_ts)
        for f, o, r in zip(flat_sums(fused), flat_sums(oracle), independent):
            worst = max(worst, float(np.max(np.abs(f - o))), float(np.max(np.abs(o - r))))
        for f, o in zip(fused, oracle):
            assert f.count == o.count
            assert np.allclose(f.norms, o.norms, rtol=1e-12)
        C = float(np.exp(rng.uniform(-2, 1)))
        two = flat_two_phase(model, tape, dl, C)
        naive_flat = naive_oracle(model, x, y, Flat(C))
        for t, o, r in zip(flat_sums(two), flat_sums(naive_flat), reference_clip(model, x, y, flat_C=C)):
            worst = max(worst, float(np.max(np.abs(t - o))), float(np.max(np.abs(o - r))))
    assert worst <= 1e-10


def test_clipped_contributions_respect_thresholds():
    rng = np.random.default_rng(99)
    for _ in range(30):
        model = random_mlp(rng)
        x, y = random_batch(rng, model)
        tape, dl = setup(model, x, y)
        ts = [float(t) for t in np.exp(rng.uniform(-4, 0, model.num_groups))]
        states = clip_per_group(model, tape, dl, ts)
        for st_, c in zip(states, ts):
            assert np.all(st_.scales * st_.norms <= c * (1 + 1e-12))
            assert 0 <= st_.count <= len(x)


def test_count_is_inclusive(rng):
    model = random_mlp(rng, depth=2)
    x, y = random_batch(rng, model, 4)
    tape, dl = setup(model, x, y)
    norms = clip_per_group(model, tape, dl, [1.0] * model.num_groups)[0].norms
    exact = [float(norms[0])] + [1.0] * (model.num_groups - 1)
    state = clip_per_group(model, tape, dl, [1.0] * model.num_groups, exact)[0]
    assert state.count == int(np.sum(norms <= norms[0]))


def test_group_finalized_when_first_layer_visited(rng):
    from groupclip.clip import GroupClipper

    model = mlp([4, 5, 5, 5, 3], "relu", rng).regroup([(0,), (1, 2), (3,)])
    x, y = random_batch(rng, model, 3)
    tape, dl = setup(model, x, y)
    clipper = GroupClipper(model, [1.0, 1.0, 1.0])
    backward_per_layer(model, tape, dl, clipper)
    assert clipper.visit_order == [2, 1, 0]


def test_memory_contract(rng):
    model = mlp([32, 64, 64, 10], "relu", rng)
    x, y = random_batch(rng, model, 32)
    tape, dl = setup(model, x, y)
    d = sum(model.group_sizes())
    with grad_meter() as fused:
        clip_per_group(model, tape, dl, [1.0] * 3)
    with grad_meter() as naive:
        naive_oracle(model, x, y, Flat(1.0), tape=tape, dlogits=dl)
    assert fused.peak == 8 * d
    assert naive.peak >= 8 * d * len(x)
    assert naive.peak >= len(x) * fused.peak
    widest = max(l.in_features + l.out_features for l in model.linears)
    assert fused.cached_peak <= 8 * len(x) * widest


def test_two_phase_caches_every_layer(rng):
    model = mlp([16, 32, 32, 10], "relu", rng)
    x, y = random_batch(rng, model, 8)
    tape, dl = setup(model, x, y)
    with grad_meter() as fused:
        clip_per_group(model, tape, dl, [1.0] * 3)
    with grad_meter() as two:
        flat_two_phase(model, tape, dl, 1.0)
    assert two.cached_peak > fused.cached_peak
    assert two.cached == 0 and fused.cached == 0
