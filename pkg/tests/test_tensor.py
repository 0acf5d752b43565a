import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmt import tensor as T
from cmt.errors import ContractError, DimensionError, NonFiniteError
from cmt.gradcheck import gradcheck
from cmt.tensor import MacCounter, Tape, Tensor


def conv_loop(x, k, stride, padding):
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                out[o, i, j] = acc
    return out


def pool_loop(x, size, stride, mode):
    c, h, w = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                vals = [x[ch, i * stride + a, j * stride + b] for a in range(size) for b in range(size)]
                out[ch, i, j] = max(vals) if mode == "max" else sum(vals) / len(vals)
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)


def test_matmul_hand_case():
    out = T.matmul([[1, 2], [3, 4]], [[5, 6], [7, 8]])
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_mac_count():
    with MacCounter() as mc:
        T.matmul(np.ones((3, 5)), np.ones((5, 4)))
    assert mc.macs == 60
    assert mc.breakdown["matmul"] == 60


def test_matmul_batched_mac_count():
    with MacCounter() as mc:
        T.matmul(np.ones((7, 3, 5)), np.ones((7, 5, 4)))
    assert mc.macs == 7 * 60


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 2, 3)), np.ones((3, 3, 2)))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(np.zeros(4)).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax([0.0, math.log(3.0)]).data, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    # dyadic logits so that the +1000 shift is exact in float64
    x = np.random.default_rng(0).integers(-64, 64, size=(3, 5)) / 8.0
    assert np.array_equal(T.softmax(x + 1000.0).data, T.softmax(x).data)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        T.softmax(np.ones((2, 3)), axis=2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
def test_softmax_rows_sum_to_one(x, axis):
    y = T.softmax(x, axis=axis).data
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, rtol=0, atol=1e-12)
    assert (y > 0).all() or (y >= 0).all()


# ---------------------------------------------------------------- conv / pool


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(3, 5, 4))
    k = np.zeros((3, 3, 1, 1))
    for c in range(3):
        k[c, c] = 1.0
    np.testing.assert_array_equal(T.conv2d(x, k).data, x)


def test_conv_sum_kernel():
    assert T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3))).data.tolist() == [[[9.0]]]


@pytest.mark.parametrize("cin,cout,h,w,k,stride,pad", [
    (1, 1, 4, 4, 2, 2, 0),
    (2, 3, 5, 6, 3, 1, 1),
    (3, 2, 7, 7, 3, 2, 1),
])
def test_conv_matches_loop_oracle(cin, cout, h, w, k, stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(cin, h, w))
    kern = rng.normal(size=(cout, cin, k, k))
    with MacCounter() as mc:
        out = T.conv2d(x, kern, stride=stride, padding=pad)
    ref = conv_loop(x, kern, stride, pad)
    np.testing.assert_allclose(out.data, ref, rtol=0, atol=1e-12)
    ho, wo = ref.shape[1:]
    assert mc.macs == cout * cin * k * k * ho * wo


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 6, 6))
    kern = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(x, kern, stride=2, padding=1).data
    for n in range(2):
        np.testing.assert_allclose(out[n], conv_loop(x[n], kern, 2, 1), atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("mode", ["max", "average"])
def test_pool_constant(mode):
    out = T.pool2d(np.full((2, 4, 6), 3.25), 2, mode=mode)
    assert (out.data == 3.25).all()


def test_pool_hand_case():
    x = [[[1.0, 2.0], [3.0, 4.0]]]
    assert T.pool2d(x, 2, mode="max").data.item() == 4.0
    assert T.pool2d(x, 2, mode="average").data.item() == 2.5


@pytest.mark.parametrize("mode", ["max", "average"])
@pytest.mark.parametrize("size,stride", [(2, 2), (3, 1), (2, 3)])
def test_pool_matches_loop_oracle(mode, size, stride):
    x = np.random.default_rng(4).normal(size=(2, 8, 8))
    np.testing.assert_allclose(T.pool2d(x, size, stride, mode).data, pool_loop(x, size, stride, mode), atol=1e-15)


def test_pool_too_large():
    with pytest.raises(DimensionError):
        T.pool2d(np.ones((1, 2, 4)), 3)


def test_maxpool_tie_goes_to_lowest_index():
    x = Tensor(np.ones((1, 2, 2)))
    with Tape() as tape:
        tape.watch(x)
        y = T.sum_(T.pool2d(x, 2, mode="max"))
    g = tape.backward(y)[x]
    np.testing.assert_array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])


# ---------------------------------------------------------------- layout


def test_reshape_round_trip():
    x = np.random.default_rng(5).normal(size=(3, 4, 5))
    y = T.reshape(T.reshape(x, (3, 20)), (3, 4, 5))
    assert np.array_equal(y.data, x)


def test_reshape_count_mismatch():
    with pytest.raises(DimensionError):
        T.reshape(np.ones((2, 3)), (4, 2))


def test_permute_round_trip():
    x = np.random.default_rng(6).normal(size=(2, 3, 4, 5))
    axes = (2, 0, 3, 1)
    y = T.permute(T.permute(x, axes), tuple(np.argsort(axes)))
    assert np.array_equal(y.data, x)


def test_upsample_block_replication():
    out = T.nearest_upsample([[1.0, 2.0], [3.0, 4.0]], 2).data
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


# ---------------------------------------------------------------- tape & policies


def test_backward_sum_is_ones():
    x = Tensor(np.random.default_rng(7).normal(size=(3, 4)))
    with Tape() as tape:
        tape.watch(x)
        y = T.sum_(x)
    np.testing.assert_array_equal(tape.backward(y)[x], np.ones((3, 4)))


def test_backward_sigmoid_at_zero():
    x = Tensor(np.zeros(5))
    with Tape() as tape:
        tape.watch(x)
        y = T.sum_(T.sigmoid(x))
    np.testing.assert_array_equal(tape.backward(y)[x], np.full(5, 0.25))


def test_backward_root_must_be_scalar():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = T.scale(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_root_gradient_is_ones_and_nodes_topological():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = T.sum_(T.mul(x, x))
    grads = tape.backward(y)
    assert grads[y].tolist() == 1.0
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen for t in node.inputs if tape.is_tracked(t))
        seen.add(id(node.out))


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        T.log(np.zeros(2))
    with pytest.raises(NonFiniteError):
        T.exp(np.array([1000.0]))


def test_untracked_ops_not_recorded():
    with Tape() as tape:
        T.add(np.ones(2), np.ones(2))
    assert tape.nodes == []


def test_dropout_eval_is_identity_and_train_reproducible():
    x = Tensor(np.random.default_rng(8).normal(size=(4, 5)))
    assert T.dropout(x, 0.2, None, training=False) is x
    a = T.dropout(x, 0.5, np.random.default_rng(9)).data
    b = T.dropout(x, 0.5, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], x.data[kept] * 2.0)


# ---------------------------------------------------------------- gradient checks

SHAPES = [(3,), (2, 3), (2, 3, 4)]


def _rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def _weighted(y, seed=99):
    """Scalarize with fixed random weights so every output entry matters."""
    return T.sum_(T.mul(y, _rand(y.shape, seed)))


UNARY = {
    "scale": lambda x: T.scale(x, -1.7),
    "exp": T.exp,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "softmax": lambda x: T.softmax(x, axis=-1),
    "softmax_axis0": lambda x: T.softmax(x, axis=0),
    "sum_axis": lambda x: T.sum_(x, axis=0),
    "mean_keepdims": lambda x: T.mean(x, axis=-1, keepdims=True),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "permute": lambda x: T.permute(x, tuple(reversed(range(x.ndim)))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_gradcheck_unary(name, shape):
    x = _rand(shape, 10)
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    errs = gradcheck(lambda t: _weighted(UNARY[name](t)), [x])
    assert max(errs) < 1e-4


@pytest.mark.parametrize("shape", SHAPES)
def test_gradcheck_log_clip(shape):
    x = np.abs(_rand(shape, 11)) + 0.2
    assert max(gradcheck(lambda t: _weighted(T.log(T.clip(t, 1e-3, 10.0))), [x])) < 1e-4


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
@pytest.mark.parametrize("sa,sb", [((3,), (3,)), ((2, 3), (3,)), ((2, 3, 4), (2, 1, 4))])
def test_gradcheck_binary_broadcast(op, sa, sb):
    errs = gradcheck(lambda a, b: _weighted(op(a, b)), [_rand(sa, 12), _rand(sb, 13)])
    assert max(errs) < 1e-4


@pytest.mark.parametrize("sa,sb", [((2, 3), (3, 4)), ((1, 1), (1, 5)), ((2, 3, 4), (2, 4, 2))])
def test_gradcheck_matmul(sa, sb):
    assert max(gradcheck(lambda a, b: _weighted(T.matmul(a, b)), [_rand(sa, 14), _rand(sb, 15)])) < 1e-4


@pytest.mark.parametrize("xs,ks,stride,pad", [
    ((1, 4, 4), (1, 1, 2, 2), 2, 0),
    ((2, 5, 5), (3, 2, 3, 3), 1, 1),
    ((2, 2, 6, 6), (2, 2, 3, 3), 2, 1),
])
def test_gradcheck_conv2d(xs, ks, stride, pad):
    f = lambda x, k: _weighted(T.conv2d(x, k, stride, pad))
    assert max(gradcheck(f, [_rand(xs, 16), _rand(ks, 17)])) < 1e-4


@pytest.mark.parametrize("mode", ["max", "average"])
@pytest.mark.parametrize("shape,size,stride", [((1, 4, 4), 2, 2), ((2, 6, 6), 3, 1), ((2, 2, 8, 8), 2, 2)])
def test_gradcheck_pool(mode, shape, size, stride):
    assert max(gradcheck(lambda x: _weighted(T.pool2d(x, size, stride, mode)), [_rand(shape, 18)])) < 1e-4


@pytest.mark.parametrize("shape", [(2, 3), (1, 4, 4), (2, 3, 2, 2)])
def test_gradcheck_upsample_and_gap(shape):
    assert max(gradcheck(lambda x: _weighted(T.nearest_upsample(x, 2)), [_rand(shape, 19)])) < 1e-4
    assert max(gradcheck(lambda x: _weighted(T.global_avg_pool(x)), [_rand(shape, 20)])) < 1e-4


@pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 6)])
def test_gradcheck_layer_norm(shape):
    c = shape[-1]
    f = lambda x, g, b: _weighted(T.layer_norm(x, g, b))
    assert max(gradcheck(f, [_rand(shape, 21), 1.0 + _rand((c,), 22), _rand((c,), 23)])) < 1e-4


@pytest.mark.parametrize("shape", SHAPES)
def test_gradcheck_dropout_fixed_mask(shape):
    f = lambda x: _weighted(T.dropout(x, 0.3, np.random.default_rng(5)))
    assert max(gradcheck(f, [_rand(shape, 24)])) < 1e-4


def test_numerical_gradient_handles_fortran_ordered_input():
    from cmt.gradcheck import numerical_gradient

    b = np.arange(6.0).reshape(2, 3).T
    num = numerical_gradient(lambda v: float((v[0] ** 2).sum()), [b], 0)
    np.testing.assert_allclose(num, 2 * b, rtol=1e-8)
