"""Op catalog: forward oracles, gradient checks, and graph contracts."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import conv2d_direct, gradcheck, scalarize
from soekit import tensor as T
from soekit.tensor import ShapeError, Tensor, backward, topo_order

RNG = np.random.default_rng(20240501)


def r(*shape):
    return RNG.standard_normal(shape)


# -- forward oracles -----------------------------------------------------------


def test_matmul_matches_brute_force():
    a = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    b = np.array([[5.0, 6.0], [7.0, 8.0]], np.float32)
    out = T.matmul(Tensor(a), Tensor(b)).data
    expect = np.zeros((2, 2), np.float32)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                expect[i, j] += a[i, k] * b[k, j]
    assert np.array_equal(out, expect)
    assert np.array_equal(expect, np.array([[19.0, 22.0], [43.0, 50.0]], np.float32))


def test_conv2d_identity_kernel():
    x = RNG.standard_normal((2, 3, 6, 6)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w)).data
    assert np.array_equal(out, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_exact_vs_direct_summation(stride, padding):
    # exact agreement on every shape up to 8x8 spatial, 4 channels
    rng = np.random.default_rng(7)
    for trial in range(40):
        b = int(rng.integers(1, 3))
        ci = int(rng.integers(1, 5))
        co = int(rng.integers(1, 5))
        h = int(rng.integers(1, 9))
        wd = int(rng.integers(1, 9))
        kh = int(rng.integers(1, 4))
        kw = int(rng.integers(1, 4))
        if h + 2 * padding < kh or wd + 2 * padding < kw:
            continue
        x = (rng.standard_normal((b, ci, h, wd)) * 3).astype(np.float32)
        w = rng.standard_normal((co, ci, kh, kw)).astype(np.float32)
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        expect = conv2d_direct(x, w, stride, padding)
        assert got.tobytes() == expect.tobytes()


def test_bilinear_resize_of_constant_is_constant():
    x = Tensor(np.full((1, 1, 8, 8), 0.37, np.float32))
    out = T.resize_bilinear(x, 16, 16).data
    assert np.allclose(out, 0.37, atol=1e-7)
    assert out.shape == (1, 1, 16, 16)


def test_nearest_resize_integer_upscale_repeats_pixels():
    x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    out = T.resize_nearest(x, 4, 4).data[0, 0]
    assert np.array_equal(out, np.repeat(np.repeat(x.data[0, 0], 2, 0), 2, 1))


def test_softmax_rows_sum_to_one():
    x = Tensor(r(3, 5, 7).astype(np.float32))
    out = T.softmax(x).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-5)
    assert (out >= 0).all()


def test_concat_and_slice_roundtrip():
    a = Tensor(r(2, 3, 4, 4).astype(np.float32))
    b = Tensor(r(2, 2, 4, 4).astype(np.float32))
    cat = T.concat([a, b], axis=1)
    assert cat.shape == (2, 5, 4, 4)
    assert np.array_equal(cat.data[:, :3], a.data)
    assert np.array_equal(cat.data[:, 3:], b.data)
    back = T.slice_(cat, (slice(None), slice(3, 5)))
    assert np.array_equal(back.data, b.data)


def test_crop_window_and_bounds():
    x = Tensor(r(1, 2, 8, 8).astype(np.float32))
    c = T.crop(x, 2, 5, 1, 4)
    assert c.shape == (1, 2, 3, 3)
    assert np.array_equal(c.data, x.data[:, :, 2:5, 1:4])
    with pytest.raises(ShapeError):
        T.crop(x, 2, 9, 0, 4)


def test_huber_trivial_values():
    z = Tensor(np.zeros(4, np.float32))
    assert T.huber(z, z, delta=1.0).item() == 0.0
    p = Tensor(np.array([0.5], np.float32))
    t = Tensor(np.array([0.0], np.float32))
    assert abs(T.huber(p, t, delta=1.0).item() - 0.125) < 1e-7
    p3 = Tensor(np.array([3.0], np.float32))
    assert abs(T.huber(p3, t, delta=1.0).item() - 2.5) < 1e-7


def test_huber_rejects_mismatched_shapes_and_bad_delta():
    with pytest.raises(ShapeError, match="huber"):
        T.huber(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        T.huber(Tensor(np.zeros(3)), Tensor(np.zeros(3)), delta=0.0)


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4), np.float32)), Tensor(np.zeros((2, 4, 3, 3), np.float32)))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_group_norm_normalises_groups():
    x = Tensor((r(2, 8, 4, 4) * 5 + 3).astype(np.float32))
    gamma = Tensor(np.ones(8, np.float32))
    beta = Tensor(np.zeros(8, np.float32))
    out = T.group_norm(x, gamma, beta, groups=4).data
    grouped = out.reshape(2, 4, -1)
    assert np.allclose(grouped.mean(axis=2), 0.0, atol=1e-5)
    assert np.allclose(grouped.var(axis=2), 1.0, atol=1e-3)


def test_cross_attention_shapes_and_rows():
    q = Tensor(r(2, 9, 8).astype(np.float32))
    k = Tensor(r(2, 2, 8).astype(np.float32))
    v = Tensor(r(2, 2, 6).astype(np.float32))
    out = T.cross_attention(q, k, v)
    assert out.shape == (2, 9, 6)


# -- determinism -----------------------------------------------------------------


def test_op_sequence_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        y = T.silu(T.conv2d(x, w, stride=2, padding=1))
        loss = T.mean(T.mul(y, y))
        backward(loss)
        return y.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- graph and backward contracts -------------------------------------------------


def test_mean_backward_is_uniform():
    w = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
    loss = T.mean(w)
    backward(loss)
    assert np.array_equal(w.grad, np.full(4, 0.25, np.float32))


def test_backward_requires_scalar_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(w, w)
    with pytest.raises(ShapeError, match="scalar"):
        backward(y)


def test_no_grad_tensors_never_accumulate():
    a = Tensor(np.ones(3, np.float32), requires_grad=False)
    b = Tensor(np.ones(3, np.float32), requires_grad=True)
    loss = T.mean(T.mul(a, b))
    backward(loss)
    assert a.grad is None
    assert b.grad is not None
    # ops among non-grad tensors record nothing
    c = T.mul(a, a)
    assert c._parents == ()
    assert not c.requires_grad


def test_grad_accumulates_across_multiple_uses():
    w = Tensor(np.array([2.0, -1.0]), requires_grad=True, dtype=np.float64)
    y = T.add(T.mul(w, w), w)  # w^2 + w -> dy/dw = 2w + 1
    loss = T.sum_(y)
    backward(loss)
    assert np.allclose(w.grad, 2 * w.data + 1)


def test_topo_order_puts_producers_first():
    a = Tensor(np.ones(2), requires_grad=True)
    b = T.mul(a, a)
    c = T.add(b, a)
    d = T.mean(c)
    order = topo_order(d)
    pos = {id(t): i for i, t in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_detach_blocks_gradient_flow():
    w = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(w, w).detach()
    z = T.mean(T.mul(y, y))
    assert not z.requires_grad
    assert y._parents == ()


# -- gradient checks against 64-bit finite differences ----------------------------


def test_grad_huber_of_linear_model():
    w = r(3, 2)
    x = r(2, 4)
    y = r(3, 4)

    def build(ts):
        return T.huber(T.matmul(ts[0], ts[1]), ts[2], delta=1.0)

    gradcheck(build, [w, x, y], wrt=[0, 1])


def test_grad_double_use_matches_fd():
    w = r(4)

    def build(ts):
        return T.mean(T.add(T.mul(ts[0], ts[0]), ts[0]))

    gradcheck(build, [w])


@pytest.mark.parametrize(
    "name",
    ["add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid", "silu",
     "sum", "mean", "reshape", "transpose", "slice", "concat", "matmul",
     "matmul_batched", "softmax", "log_softmax", "cross_attention", "conv2d_s1",
     "conv2d_s2", "conv2d_transpose", "group_norm", "resize_nearest",
     "resize_bilinear_up", "resize_bilinear_down", "huber", "masked_huber", "mse"],
)
def test_gradcheck_catalog(name):
    checks = catalog_gradchecks()
    build, arrays, wrt = checks[name]
    gradcheck(build, arrays, wrt=wrt)


def catalog_gradchecks():
    """One finite-difference case per catalog op (shared with acceptance).

    Every weight array used by the scalarizing reduction is drawn once here
    so the analytic pass and the numeric oracle see identical functions.
    """
    rng = np.random.default_rng(3)

    def rr(*shape):
        return rng.standard_normal(shape)

    def case(op, out_shape, arrays, wrt):
        w = rr(*out_shape)
        return (lambda ts: scalarize(op(ts), w), arrays, wrt)

    cases = {
        "add": case(lambda ts: T.add(ts[0], ts[1]), (2, 3, 4, 4), [rr(2, 3, 4, 4), rr(3, 1, 1)], [0, 1]),
        "sub": case(lambda ts: T.sub(ts[0], ts[1]), (3, 4), [rr(3, 4), rr(3, 4)], [0, 1]),
        "mul": case(lambda ts: T.mul(ts[0], ts[1]), (2, 3, 4, 4), [rr(2, 3, 4, 4), rr(1, 3, 1, 1)], [0, 1]),
        "div": case(lambda ts: T.div(ts[0], ts[1]), (3, 4), [rr(3, 4), rr(3, 4) + 3.0], [0, 1]),
        "neg": case(lambda ts: T.neg(ts[0]), (5,), [rr(5)], [0]),
        "exp": case(lambda ts: T.exp(ts[0]), (3, 3), [rr(3, 3) * 0.5], [0]),
        "log": case(lambda ts: T.log(ts[0]), (3, 3), [np.abs(rr(3, 3)) + 0.5], [0]),
        "sigmoid": case(lambda ts: T.sigmoid(ts[0]), (4, 4), [rr(4, 4)], [0]),
        "silu": case(lambda ts: T.silu(ts[0]), (4, 4), [rr(4, 4)], [0]),
        "sum": case(lambda ts: T.sum_(ts[0], axis=1), (3, 5), [rr(3, 4, 5)], [0]),
        "mean": case(lambda ts: T.mean(ts[0], axis=(2, 3), keepdims=True), (2, 3, 1, 1), [rr(2, 3, 4, 4)], [0]),
        "reshape": case(lambda ts: T.reshape(ts[0], (4, 6)), (4, 6), [rr(2, 3, 4)], [0]),
        "transpose": case(lambda ts: T.transpose(ts[0], (1, 0, 2)), (3, 2, 4), [rr(2, 3, 4)], [0]),
        "slice": case(lambda ts: T.slice_(ts[0], (slice(None), slice(1, 3))), (3, 2, 4), [rr(3, 4, 4)], [0]),
        "concat": case(lambda ts: T.concat([ts[0], ts[1]], axis=1), (2, 5, 3, 3), [rr(2, 3, 3, 3), rr(2, 2, 3, 3)], [0, 1]),
        "matmul": case(lambda ts: T.matmul(ts[0], ts[1]), (3, 5), [rr(3, 4), rr(4, 5)], [0, 1]),
        "matmul_batched": case(lambda ts: T.matmul(ts[0], ts[1]), (2, 3, 5), [rr(2, 3, 4), rr(4, 5)], [0, 1]),
        "softmax": case(lambda ts: T.softmax(ts[0]), (3, 4), [rr(3, 4)], [0]),
        "log_softmax": case(lambda ts: T.log_softmax(ts[0]), (3, 4), [rr(3, 4)], [0]),
        "cross_attention": case(
            lambda ts: T.cross_attention(ts[0], ts[1], ts[2]), (2, 5, 3),
            [rr(2, 5, 4), rr(2, 2, 4), rr(2, 2, 3)], [0, 1, 2],
        ),
        "conv2d_s1": case(
            lambda ts: T.conv2d(ts[0], ts[1], stride=1, padding=1), (2, 4, 5, 5),
            [rr(2, 3, 5, 5), rr(4, 3, 3, 3)], [0, 1],
        ),
        "conv2d_s2": case(
            lambda ts: T.conv2d(ts[0], ts[1], stride=2, padding=1), (2, 4, 3, 3),
            [rr(2, 3, 5, 5), rr(4, 3, 3, 3)], [0, 1],
        ),
        "conv2d_transpose": case(
            lambda ts: T.conv2d_transpose(ts[0], ts[1], stride=2), (2, 4, 8, 8),
            [rr(2, 3, 4, 4), rr(3, 4, 2, 2)], [0, 1],
        ),
        "group_norm": case(
            lambda ts: T.group_norm(ts[0], ts[1], ts[2], groups=2), (2, 4, 3, 3),
            [rr(2, 4, 3, 3), rr(4) + 1.5, rr(4)], [0, 1, 2],
        ),
        "resize_nearest": case(lambda ts: T.resize_nearest(ts[0], 6, 6), (1, 2, 6, 6), [rr(1, 2, 3, 3)], [0]),
        "resize_bilinear_up": case(lambda ts: T.resize_bilinear(ts[0], 7, 7), (1, 2, 7, 7), [rr(1, 2, 4, 4)], [0]),
        "resize_bilinear_down": case(lambda ts: T.resize_bilinear(ts[0], 3, 3), (1, 2, 3, 3), [rr(1, 2, 6, 6)], [0]),
        "huber": (lambda ts: T.huber(ts[0], ts[1], delta=0.8), [rr(4, 4), rr(4, 4)], [0, 1]),
        "masked_huber": (
            lambda ts: T.masked_huber(ts[0], ts[1], Tensor(MASK_2344, dtype=np.float64), delta=1.0),
            [rr(2, 3, 4, 4), rr(2, 3, 4, 4)],
            [0, 1],
        ),
        "mse": (lambda ts: T.mse(ts[0], ts[1]), [rr(4, 4), rr(4, 4)], [0, 1]),
    }
    return cases


MASK_2344 = (np.random.default_rng(11).random((2, 1, 4, 4)) > 0.5).astype(np.float64)
if MASK_2344.sum() == 0:
    MASK_2344[0, 0, 0, 0] = 1.0


# -- masked huber contracts ---------------------------------------------------------


def test_masked_huber_gates_outside_values():
    rng = np.random.default_rng(5)
    pred = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    target = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    mask = np.zeros((2, 1, 4, 4), np.float32)
    mask[:, :, 1:3, 1:3] = 1.0
    base = T.masked_huber(Tensor(pred), Tensor(target), Tensor(mask)).item()
    pred2 = pred + rng.standard_normal(pred.shape).astype(np.float32) * (1 - mask)
    moved = T.masked_huber(Tensor(pred2), Tensor(target), Tensor(mask)).item()
    assert base == moved


def test_masked_huber_empty_mask_rejected():
    z = Tensor(np.zeros((1, 1, 2, 2), np.float32))
    with pytest.raises(ValueError, match="degenerate"):
        T.masked_huber(z, z, Tensor(np.zeros((1, 1, 2, 2), np.float32)))


# -- property tests -----------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
def test_conv_identity_property(b, c, side, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, c, side, side)).astype(np.float32)
    w = np.zeros((c, c, 1, 1), np.float32)
    w[np.arange(c), np.arange(c), 0, 0] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_huber_nonnegative_and_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3)).astype(np.float32)
    b = rng.standard_normal((3, 3)).astype(np.float32)
    assert T.huber(Tensor(a), Tensor(b)).item() >= 0.0
    assert T.huber(Tensor(a), Tensor(a.copy())).item() == 0.0
