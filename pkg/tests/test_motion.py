import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from toc3d.motion import (
    MOTION_RAW_DIM,
    MotionContext,
    MotionNorm,
    MotionParams,
    PEConfig,
    RefMLP,
    align_queries,
    align_refpoints,
    conditional_layernorm,
    encode_motion,
    motion_vector,
    positional_encode,
    scale_refpoints,
)
from toc3d.numerics import Linear, make_rng
from toc3d.scene import HistoryQuerySet, make_pose, yaw_rotation


def queries(n=5, cq=8, seed=0, ego=None, v=None, dt=0.5):
    rng = np.random.default_rng(seed)
    ref = np.ones((n, 4))
    ref[:, :3] = rng.uniform(-20, 20, (n, 3))
    return HistoryQuerySet(rng.normal(size=(n, cq)), ref, rng.normal(size=(n, 3)) if v is None else v,
                           rng.uniform(size=n), dt, np.eye(4) if ego is None else ego)


def test_pe_examples():
    np.testing.assert_allclose(positional_encode([0.0], PEConfig(2, False)), [0, 1, 0, 1])
    np.testing.assert_allclose(positional_encode([0.5], PEConfig(1, False)), [1, 0], atol=1e-15)
    assert positional_encode([1.0, 2.0, 3.0], PEConfig(4, True)).shape == (27,)
    assert PEConfig().out_dim(MOTION_RAW_DIM) == 420
    with pytest.raises(ValueError):
        PEConfig(0)


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8), st.integers(1, 12))
def test_pe_bounded(x, bands):
    out = positional_encode(np.array(x), PEConfig(bands, False))
    assert np.all(np.abs(out) <= 1.0)


def test_align_examples():
    p = np.array([[2.0, 3.0, 4.0, 1.0]])
    np.testing.assert_array_equal(align_refpoints(p, np.eye(4)), p)
    np.testing.assert_array_equal(align_refpoints(p, make_pose(np.eye(3), [1, 0, 0])), [[3, 3, 4, 1]])
    out = align_refpoints([[1.0, 0, 0, 1]], make_pose(yaw_rotation(math.pi / 2), [0, 0, 0]))
    np.testing.assert_allclose(out, [[0, 1, 0, 1]], atol=1e-15)


def test_align_rejects_bad_inputs():
    with pytest.raises(ValueError):
        align_refpoints([[0.0, 0, 0, 1]], np.diag([2.0, 1, 1, 1]))
    with pytest.raises(ValueError):
        align_refpoints([[0.0, 0, 0, 2]], np.eye(4))
    with pytest.raises(ValueError):
        align_refpoints([[0.0, 0, 0]], np.eye(4))


def _pose(yaw, t):
    return make_pose(yaw_rotation(yaw), t)


pose_args = st.tuples(st.floats(-math.pi, math.pi), st.lists(st.floats(-50, 50), min_size=3, max_size=3))


@settings(max_examples=100)
@given(pose_args, pose_args)
def test_align_composition(a, b):
    A, B = _pose(*a), _pose(*b)
    p = np.array([[1.0, -2.0, 0.5, 1.0], [10.0, 4.0, -1.0, 1.0]])
    np.testing.assert_allclose(align_refpoints(align_refpoints(p, A), B), align_refpoints(p, B @ A), atol=1e-10)


@settings(max_examples=100)
@given(pose_args, pose_args, st.lists(st.floats(-40, 40), min_size=3, max_size=3))
def test_static_object_alignment_exact(prev_pose, cur_pose, world):
    prev, cur = _pose(*prev_pose), _pose(*cur_pose)
    w = np.append(world, 1.0)
    in_prev = np.linalg.inv(prev) @ w
    truth = np.linalg.inv(cur) @ w
    e = np.linalg.inv(cur) @ prev
    np.testing.assert_allclose(align_refpoints(in_prev[None], e)[0], truth, atol=1e-12)


def test_motion_vector_layout():
    ego = _pose(0.2, [3.0, 0.0, 0.0])
    q = queries(3, ego=ego, v=np.array([[10.0, 0, 0]] * 3), dt=0.5)
    mv = motion_vector(q, MotionNorm(v_max=10, horizon=1.0, translation=10))
    assert mv.shape == (3, MOTION_RAW_DIM)
    np.testing.assert_allclose(mv[:, :3], [[1, 0, 0]] * 3)
    np.testing.assert_allclose(mv[:, 3], 0.5)
    flat = ego.copy()
    flat[:3, 3] /= 10
    np.testing.assert_allclose(mv[0, 4:], flat.reshape(-1))


def test_encode_motion_zero_heads():
    q = queries()
    d = PEConfig().out_dim(MOTION_RAW_DIM)
    ctx = encode_motion(q, PEConfig(), Linear.zeros(d, 8), Linear.zeros(d, 8))
    assert not ctx.gamma.any() and not ctx.beta.any()
    assert ctx.v_m.shape == (5, 420)


def test_static_queries_share_gamma():
    q = queries(4, v=np.zeros((4, 3)), dt=0.0)
    p = MotionParams.init(0, 8)
    ctx = encode_motion(q, p.pe, p.w_gamma, p.w_beta)
    np.testing.assert_array_equal(ctx.gamma, np.repeat(ctx.gamma[:1], 4, axis=0))


def test_encode_motion_dimension_mismatch():
    with pytest.raises(ValueError):
        encode_motion(queries(), PEConfig(), Linear.zeros(10, 8), Linear.zeros(10, 8))


def _ctx(n, cq, gamma, beta):
    return MotionContext(np.zeros((n, 1)), np.full((n, cq), gamma, float), np.full((n, cq), beta, float))


def _ln(x):
    return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)


def test_conditional_ln_neutral_and_degenerate_affine():
    q = queries(3, cq=8)
    mlp = RefMLP.init(make_rng(0), 8)
    ref = align_refpoints(q.refpoints, q.ego_transform)
    out = conditional_layernorm(q, ref, _ctx(3, 8, 1.0, 0.0), mlp)
    np.testing.assert_allclose(out.content_emb, _ln(q.contents), atol=1e-12)
    np.testing.assert_allclose(out.refpoint_emb, _ln(mlp(scale_refpoints(ref))), atol=1e-12)
    out0 = conditional_layernorm(q, ref, _ctx(3, 8, 0.0, 0.7), mlp)
    assert np.all(out0.content_emb == 0.7) and np.all(out0.refpoint_emb == 0.7)
    np.testing.assert_array_equal(out0.fused, out0.content_emb + out0.refpoint_emb)


def test_conditional_ln_two_query_scalar_trace():
    cq = 4
    rng = np.random.default_rng(5)
    q = HistoryQuerySet(rng.normal(size=(2, cq)), [[1.0, 2, 0.5, 1], [-3, 0.5, 1, 1]], np.zeros((2, 3)),
                        [0.9, 0.8], 0.5, np.eye(4))
    fc1 = Linear(np.full((cq, 4), 0.1), np.zeros(cq))
    fc2 = Linear(np.arange(cq * cq, dtype=float).reshape(cq, cq) / 50, np.full(cq, 0.01))
    gamma = np.array([[1.0, 2.0, 0.5, -1.0], [0.3, 0.3, 0.3, 0.3]])
    beta = np.array([[0.1, 0.0, -0.1, 0.2], [0.0, 1.0, 0.0, 1.0]])
    got = conditional_layernorm(q, q.refpoints, MotionContext(np.zeros((2, 1)), gamma, beta), RefMLP(fc1, fc2))

    def gelu(x):
        return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    def ln(v):
        m = sum(v) / len(v)
        var = sum((x - m) ** 2 for x in v) / len(v)
        return [(x - m) / math.sqrt(var + 1e-6) for x in v]

    for i in range(2):
        p = [q.refpoints[i, 0] / 50, q.refpoints[i, 1] / 50, q.refpoints[i, 2] / 50, 1.0]
        h1 = [gelu(sum(fc1.weight[o, k] * p[k] for k in range(4)) + fc1.bias[o]) for o in range(cq)]
        h2 = [sum(fc2.weight[o, k] * h1[k] for k in range(cq)) + fc2.bias[o] for o in range(cq)]
        r = [gamma[i, j] * v + beta[i, j] for j, v in enumerate(ln(h2))]
        c = [gamma[i, j] * v + beta[i, j] for j, v in enumerate(ln(list(q.contents[i])))]
        np.testing.assert_allclose(got.fused[i], np.add(r, c), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 100.0), st.integers(0, 4), st.integers(0, 1000))
def test_content_scale_invariance(c, row, seed):
    q = queries(5, cq=16, seed=seed)
    mlp = RefMLP.init(make_rng(1), 16)
    rng = np.random.default_rng(seed)
    ctx = MotionContext(np.zeros((5, 1)), rng.normal(size=(5, 16)), rng.normal(size=(5, 16)))
    scaled = HistoryQuerySet(q.contents.copy(), q.refpoints, q.velocities, q.confidences, q.dt, q.ego_transform)
    scaled.contents[row] *= c
    # exact invariance needs a vanishing epsilon
    a = conditional_layernorm(q, q.refpoints, ctx, mlp, eps=0.0)
    b = conditional_layernorm(scaled, q.refpoints, ctx, mlp, eps=0.0)
    np.testing.assert_allclose(a.content_emb, b.content_emb, atol=1e-9)
    # default epsilon: deviation bounded by eps / (2 var) per unit of output
    a = conditional_layernorm(q, q.refpoints, ctx, mlp)
    b = conditional_layernorm(scaled, q.refpoints, ctx, mlp)
    var = min(q.contents[row].var(), scaled.contents[row].var())
    bound = 1e-6 / (2 * var) * np.abs(ctx.gamma[row]).max() * np.sqrt(16) + 1e-12
    assert np.abs(a.content_emb - b.content_emb).max() <= bound


def test_conditional_ln_shape_checks():
    q = queries(3, cq=8)
    with pytest.raises(ValueError):
        conditional_layernorm(q, q.refpoints, _ctx(3, 6, 1, 0), RefMLP.init(make_rng(0), 8))
    with pytest.raises(ValueError):
        conditional_layernorm(q, q.refpoints, _ctx(2, 8, 1, 0), RefMLP.init(make_rng(0), 8))


def test_align_queries_shapes_and_determinism():
    q = queries(6, cq=8)
    a = align_queries(q, MotionParams.init(3, 8))
    b = align_queries(q, MotionParams.init(3, 8))
    assert a.fused.shape == a.content_emb.shape == a.refpoint_emb.shape == (6, 8)
    np.testing.assert_array_equal(a.fused, b.fused)
