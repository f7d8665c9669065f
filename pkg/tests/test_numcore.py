import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from li3detr.numcore import (
    ContractError,
    DimensionError,
    GradCheckError,
    Tensor,
    backward,
    bilinear_sample,
    grad_check,
    ops,
    primitive_forward,
    reset_sampling_overflow,
    sampling_overflow_count,
    tape,
)


def corner_map():
    # (u, v) = (0,0)->1, (1,0)->3, (0,1)->5, (1,1)->7 ; map is indexed [row=v, col=u]
    return np.array([[[1.0], [3.0]], [[5.0], [7.0]]])


def test_softmax_uniform():
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_sigmoid_zero():
    assert ops.sigmoid(Tensor(0.0)).data == 0.5


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError, match="conv2d"):
        ops.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))))


def test_primitive_forward_dispatch():
    out = primitive_forward("conv2d", [Tensor(np.ones((4, 4, 1))), Tensor(np.ones((3, 3, 1, 1)))],
                            pad=1)
    assert out.shape == (4, 4, 1)
    assert out.data[1, 1, 0] == 9.0 and out.data[0, 0, 0] == 4.0
    with pytest.raises(ValueError):
        primitive_forward("nonsense", [])


def test_conv2d_stride_shape():
    out = ops.conv2d(Tensor(np.ones((8, 8, 2))), Tensor(np.ones((3, 3, 2, 5))), stride=2, pad=1)
    assert out.shape == (4, 4, 5)


# ---------------------------------------------------------------- bilinear


def test_bilinear_centre_is_mean_of_corners():
    out = bilinear_sample(Tensor(corner_map()), Tensor([[0.5, 0.5]]))
    assert out.data[0, 0] == pytest.approx(4.0, abs=1e-15)


def test_bilinear_grid_point_exact():
    out = bilinear_sample(Tensor(corner_map()), Tensor([[1.0, 0.0]]))
    assert out.data[0, 0] == 3.0


def test_bilinear_quarter_point():
    # (1 - 0.25) * 1 + 0.25 * 3
    out = bilinear_sample(Tensor(corner_map()), Tensor([[0.25, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.5, abs=1e-15)


def test_bilinear_reproduces_every_grid_value():
    rng = np.random.default_rng(1)
    fmap = rng.normal(size=(5, 7, 3))
    vv, uu = np.meshgrid(np.arange(5), np.arange(7), indexing="ij")
    loc = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
    out = bilinear_sample(Tensor(fmap), Tensor(loc))
    np.testing.assert_array_equal(out.data, fmap.reshape(-1, 3))


def test_bilinear_clamps_and_counts_overflow():
    reset_sampling_overflow()
    out = bilinear_sample(Tensor(corner_map()), Tensor([[-3.0, 0.0], [5.0, 9.0], [0.5, 0.5]]))
    np.testing.assert_allclose(out.data[:, 0], [1.0, 7.0, 4.0])
    assert sampling_overflow_count() == 2
    loc = Tensor([[-3.0, 0.5]], requires_grad=True)
    with tape() as tp:
        y = ops.sum(bilinear_sample(Tensor(corner_map()), loc))
        g = backward(tp, y)
    assert g[loc][0, 0] == 0.0 and g[loc][0, 1] != 0.0


def test_bilinear_batched_matches_single_maps():
    rng = np.random.default_rng(2)
    maps = rng.normal(size=(3, 4, 5, 2))
    loc = rng.uniform(0, 3, size=(6, 2))
    batch = np.array([0, 1, 2, 2, 1, 0])
    out = bilinear_sample(Tensor(maps), Tensor(loc), batch)
    for i in range(6):
        single = bilinear_sample(Tensor(maps[batch[i]]), Tensor(loc[i:i + 1]))
        np.testing.assert_allclose(out.data[i], single.data[0], rtol=1e-14)


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with tape() as tp:
        y = x * x
        g = backward(tp, y)
    assert g[x] == pytest.approx(6.0)
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    with tape() as tp:
        g = backward(tp, ops.sigmoid(x))
    assert g[x] == pytest.approx(0.25)


def test_softmax_sum_has_zero_gradient():
    rng = np.random.default_rng(3)
    W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 1)))
    with tape() as tp:
        g = backward(tp, ops.sum(ops.softmax(W @ x, axis=0)))
    np.testing.assert_allclose(g[W], 0.0, atol=1e-15)


def test_fan_out_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with tape() as tp:
        y = x * x + x * 3.0 + ops.sin(x)
        g = backward(tp, y)
    assert g[x] == pytest.approx(2 * 2.0 + 3.0 + np.cos(2.0))


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with tape() as tp:
        y = x * 2.0
        with pytest.raises(ContractError):
            backward(tp, y)


def test_second_backward_on_same_tape_rejected():
    x = Tensor(1.5, requires_grad=True)
    with tape() as tp:
        y = ops.exp(x)
        backward(tp, y)
        with pytest.raises(ContractError):
            backward(tp, y)


def test_no_recording_without_tape():
    x = Tensor(1.0, requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad and y.node_id is None


def test_tape_order_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    with tape() as tp:
        a = x * 2.0
        b = ops.exp(a)
        c = ops.sum(a + b)
    for node in tp.nodes:
        assert all(i is None or i < node.output for i in node.inputs)
    assert [n.kind for n in tp.nodes] == ["mul", "exp", "add", "sum"]
    assert c.node_id == tp.nodes[-1].output


# ---------------------------------------------------------------- grad_check


def test_grad_check_quadratic():
    assert grad_check(lambda x: ops.sum(x * x), np.array([3.0])) <= 1e-9


def test_grad_check_reports_nan_coordinate():
    with pytest.raises(GradCheckError, match="coordinate 1"):
        # only the second coordinate's central difference leaves the log domain
        grad_check(lambda x: ops.sum(ops.log(x)), np.array([1.0, 1e-7]))


def _probe(rng, shape):
    return rng.normal(size=shape)


# each case: (name, function of x, input sampler). Non-smooth ops are probed
# away from their kinks.
def _cases():
    r = np.random.default_rng(11)
    W = r.normal(size=(4, 3))
    K = r.normal(size=(3, 3, 2, 3))
    P = r.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4, 1, 0])
    return [
        ("add", lambda x: ops.sum((x + P[0]) * P[1]), lambda g: g.normal(size=3)),
        ("mul", lambda x: ops.sum(x * x * P[0]), lambda g: g.normal(size=3)),
        ("div", lambda x: ops.sum(P[0] / (x * x + 1.0)), lambda g: g.normal(size=3)),
        ("matmul", lambda x: ops.sum(ops.sin(x @ W.T)), lambda g: g.normal(size=(2, 3))),
        ("conv2d", lambda x: ops.sum(ops.sin(ops.conv2d(x, Tensor(K), stride=2, pad=1))),
         lambda g: g.normal(size=(5, 4, 2))),
        ("relu", lambda x: ops.sum(ops.relu(x) * P[0]),
         lambda g: np.sign(g.normal(size=3)) * g.uniform(0.1, 1, 3)),
        ("sigmoid", lambda x: ops.sum(ops.sigmoid(x) * P[0]), lambda g: g.normal(size=3)),
        ("softmax", lambda x: ops.sum(ops.softmax(x, axis=1) * P[:2]),
         lambda g: g.normal(size=(2, 3))),
        ("layer_norm", lambda x: ops.sum(ops.layer_norm(x, P[0], P[1]) * P[2:4]),
         lambda g: g.normal(size=(2, 3))),
        ("gather", lambda x: ops.sum(ops.sin(ops.gather(x, idx))), lambda g: g.normal(size=(5, 2))),
        ("scatter_add", lambda x: ops.sum(ops.sin(ops.scatter_add(x, idx, 5))),
         lambda g: g.normal(size=(6, 2))),
        ("reshape", lambda x: ops.sum(ops.reshape(x, (3, 2)) * P[:3, :2]),
         lambda g: g.normal(size=(2, 3))),
        ("transpose", lambda x: ops.sum(ops.transpose(x) * P[:3, :2]),
         lambda g: g.normal(size=(2, 3))),
        ("concat", lambda x: ops.sum(ops.sin(ops.concat([x, x * 2.0], axis=1))),
         lambda g: g.normal(size=(2, 3))),
        ("slice", lambda x: ops.sum(ops.sin(x[1:, ::2])), lambda g: g.normal(size=(3, 4))),
        ("sin", lambda x: ops.sum(ops.sin(x)), lambda g: g.normal(size=3)),
        ("cos", lambda x: ops.sum(ops.cos(x)), lambda g: g.normal(size=3)),
        ("log", lambda x: ops.sum(ops.log(x * x + 0.5)), lambda g: g.normal(size=3)),
        ("exp", lambda x: ops.sum(ops.exp(x)), lambda g: g.normal(size=3)),
        ("abs", lambda x: ops.sum(ops.abs(x) * P[0]),
         lambda g: np.sign(g.normal(size=3)) * g.uniform(0.1, 1, 3)),
        ("power", lambda x: ops.sum((x * x + 1.0) ** 2.5), lambda g: g.normal(size=3)),
        ("segment_max", lambda x: ops.sum(ops.segment_max(x, np.array([0, 0, 1, 2, 2]), 3) * P[:3, :2]),
         lambda g: g.normal(size=(5, 2))),
        ("bilinear_map", lambda x: ops.sum(ops.sin(bilinear_sample(x, Tensor(P[:, :2] * 0.3 + 1.1)))),
         lambda g: g.normal(size=(4, 3, 2))),
        ("bilinear_loc", lambda x: ops.sum(bilinear_sample(Tensor(np.sin(np.arange(24.0)).reshape(4, 3, 2)), x) ** 2),
         lambda g: g.uniform(0.05, 0.95, size=(6, 2)) + g.integers(0, 2, size=(6, 2))),
    ]


@pytest.mark.parametrize("case", _cases(), ids=lambda c: c[0])
def test_primitive_gradients_match_finite_differences(case):
    _, f, sampler = case
    rng = np.random.default_rng(zlib.crc32(case[0].encode()))
    worst = 0.0
    for _ in range(100):
        worst = max(worst, grad_check(f, sampler(rng)))
    assert worst <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    s = ops.softmax(Tensor(xs)).data
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_reproducible_across_tapes(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    W = rng.normal(size=(4, 2))
    out = []
    for _ in range(2):
        x = Tensor(x0, requires_grad=True)
        with tape() as tp:
            y = ops.sum(ops.softmax(ops.relu(x) @ W, axis=1) ** 2)
            out.append(backward(tp, y)[x])
    np.testing.assert_array_equal(out[0], out[1])
