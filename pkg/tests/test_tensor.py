import io
import math

import numpy as np
import pytest

from rcfusion import (
    Tensor,
    ShapeError,
    backward,
    concat,
    conv2d,
    elementwise_activation,
    finite_difference_check,
    global_max_pool,
    matmul,
    max_pool2d,
    relu,
    sigmoid,
    softmax,
    tanh,
    tensor_mean,
    tensor_sum,
    transpose,
)
from rcfusion import rcft


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def mul_self(t):
    return t * t


# ---------------------------------------------------------------------------
# independent oracles

def naive_conv2d(x, w, b, stride, padding):
    """Sliding-window dot products, nested loops all the way down."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[ni, fi, i, j] = np.sum(patch * w[fi]) + b[fi]
    return out


def naive_max_pool(x, extent, stride):
    n, c, h, w = x.shape
    oh = (h - extent) // stride + 1
    ow = (w - extent) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[ni, ci, i, j] = x[
                        ni, ci, i * stride : i * stride + extent, j * stride : j * stride + extent
                    ].max()
    return out


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    eye = t64(np.eye(2))
    m = t64([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)


def test_matmul_zero():
    out = matmul(t64([[1.0, 2.0]]), t64([[0.0], [0.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_hand_expansion():
    out = matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


# ---------------------------------------------------------------------------
# conv2d

def test_conv2d_output_side_formula():
    x = t64(np.zeros((1, 1, 7, 7)))
    w = t64(np.zeros((1, 1, 3, 3)))
    b = t64(np.zeros(1))
    assert conv2d(x, w, b, stride=1, padding=0).shape == (1, 1, 5, 5)


def test_conv2d_all_ones():
    x = t64(np.ones((1, 1, 3, 3)))
    w = t64(np.ones((1, 1, 3, 3)))
    b = t64(np.zeros(1))
    out = conv2d(x, w, b, stride=1, padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_naive_oracle(stride, padding):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = conv2d(t64(x), t64(w), t64(b), stride=stride, padding=padding)
    expected = naive_conv2d(x, w, b, stride, padding)
    assert np.max(np.abs(out.data - expected)) < 1e-6


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))), t64(np.zeros(1)))


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64(np.zeros(1)))


def test_conv_shape_algebra_exhaustive():
    # output side floor((W - F + 2P) / S) + 1 over the whole small grid
    for w in range(1, 17):
        for f in range(1, w + 1):
            for p in range(0, 4):
                for s in range(1, 4):
                    x = Tensor(np.zeros((1, 1, w, w), dtype=np.float32))
                    k = Tensor(np.zeros((1, 1, f, f), dtype=np.float32))
                    b = Tensor(np.zeros(1, dtype=np.float32))
                    out = conv2d(x, k, b, stride=s, padding=p)
                    expected = (w - f + 2 * p) // s + 1
                    assert out.shape == (1, 1, expected, expected)


# ---------------------------------------------------------------------------
# pooling

def test_max_pool_output_side():
    out = max_pool2d(t64(np.zeros((1, 1, 4, 4))), extent=2, stride=2)
    assert out.shape == (1, 1, 2, 2)


def test_max_pool_window_max():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert max_pool2d(x, extent=2, stride=2).item() == 4.0


def test_max_pool_matches_naive_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 1, 6, 6))
    out = max_pool2d(t64(x), extent=2, stride=2)
    assert np.array_equal(out.data, naive_max_pool(x, 2, 2))


def test_max_pool_extent_exceeds_input():
    with pytest.raises(ShapeError):
        max_pool2d(t64(np.zeros((1, 1, 3, 3))), extent=4, stride=1)


def test_pool_shape_algebra_exhaustive():
    for w in range(1, 17):
        for f in range(1, w + 1):
            for s in range(1, 4):
                x = Tensor(np.zeros((1, 1, w, w), dtype=np.float32))
                out = max_pool2d(x, extent=f, stride=s)
                expected = (w - f) // s + 1
                assert out.shape == (1, 1, expected, expected)


def test_global_max_pool_enumerated():
    x = t64([[[[1.0, 7.0], [3.0, 5.0]]]])
    assert global_max_pool(x).item() == 7.0


def test_global_max_pool_constant():
    x = t64(np.full((2, 3, 4, 4), 2.5))
    assert np.array_equal(global_max_pool(x).data, np.full((2, 3), 2.5))


def test_global_max_pool_matches_flatten_max():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 4))
    out = global_max_pool(t64(x))
    assert np.array_equal(out.data, x.reshape(2, 3, -1).max(axis=2))


# ---------------------------------------------------------------------------
# activations and softmax

def test_relu_values():
    out = relu(t64([-2.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_sigmoid_tanh_origin():
    assert sigmoid(t64([0.0])).data[0] == 0.5
    assert tanh(t64([0.0])).data[0] == 0.0


def test_sigmoid_symmetry_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(100) * 5
    s = sigmoid(t64(x)).data + sigmoid(t64(-x)).data
    assert np.max(np.abs(s - 1.0)) < 1e-12


def test_elementwise_activation_dispatch_and_unknown():
    x = t64([1.0, -1.0])
    assert np.array_equal(elementwise_activation(x, "relu").data, [1.0, 0.0])
    with pytest.raises(ValueError):
        elementwise_activation(x, "swish")


def test_softmax_symmetry():
    out = softmax(t64([[0.0, 0.0]]))
    assert np.array_equal(out.data, [[0.5, 0.5]])


def test_softmax_large_logits_no_overflow():
    out = softmax(t64([[1000.0, 1000.0]]))
    assert np.all(np.isfinite(out.data))
    assert np.array_equal(out.data, [[0.5, 0.5]])


def test_softmax_closed_form():
    out = softmax(t64([[math.log(2.0), 0.0]]))
    assert np.max(np.abs(out.data - [2.0 / 3.0, 1.0 / 3.0])) < 1e-12


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(13)
    z = rng.standard_normal((8, 5)) * 10
    p = softmax(t64(z)).data
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-6
    p_shift = softmax(t64(z + 123.45)).data
    assert np.max(np.abs(p - p_shift)) < 1e-6


# ---------------------------------------------------------------------------
# concat

def test_concat_definition():
    out = concat([t64([1.0, 2.0]), t64([3.0])], axis=0)
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])


def test_concat_single_input_identity():
    x = t64([4.0, 5.0])
    assert np.array_equal(concat([x], axis=0).data, x.data)


def test_concat_round_trip_split():
    rng = np.random.default_rng(17)
    parts = [rng.standard_normal((2, k)) for k in (1, 3, 2)]
    out = concat([t64(p) for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        assert np.array_equal(out.data[:, lo:hi], p)


def test_concat_incompatible_shapes():
    with pytest.raises(ShapeError):
        concat([t64(np.ones((2, 2))), t64(np.ones((3, 3)))], axis=1)


# ---------------------------------------------------------------------------
# backward

def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3) + 1.0, requires_grad=True)
    backward(tensor_sum(x))
    assert np.array_equal(x.grad.data, np.ones((2, 3)))


def test_backward_quadratic():
    x = t64([1.0, 2.0, 3.0], requires_grad=True)
    backward(tensor_sum(x * x))
    assert np.array_equal(x.grad.data, [2.0, 4.0, 6.0])


def test_backward_requires_scalar_root():
    x = t64([1.0, 2.0], requires_grad=True)
    y = x * x
    with pytest.raises(ValueError):
        backward(y)


def test_backward_detached_root_rejected():
    x = t64(3.0, requires_grad=True)
    with pytest.raises(ValueError):
        backward(x)


def test_gradient_accumulation_across_branches():
    # combined root grad equals the sum of per-branch grads from separate tapes
    val = np.array([1.5, -2.0, 0.5])
    x = t64(val, requires_grad=True)
    root = tensor_sum(x * x) + tensor_sum(x * 3.0)
    backward(root)
    combined = x.grad.data.copy()

    xa = t64(val, requires_grad=True)
    backward(tensor_sum(xa * xa))
    xb = t64(val, requires_grad=True)
    backward(tensor_sum(xb * 3.0))
    assert np.allclose(combined, xa.grad.data + xb.grad.data, atol=1e-15)


def test_backward_accumulates_across_calls():
    x = t64([2.0], requires_grad=True)
    backward(tensor_sum(x * x))
    backward(tensor_sum(x * x))
    assert np.array_equal(x.grad.data, [8.0])


# ---------------------------------------------------------------------------
# finite differences

def test_fd_check_linear_is_exact():
    err = finite_difference_check(lambda x: tensor_sum(x), t64(np.arange(5.0)))
    assert err < 1e-10


def test_fd_check_sum_of_squares():
    rng = np.random.default_rng(23)
    err = finite_difference_check(lambda x: tensor_sum(x * x), t64(rng.standard_normal(6)))
    assert err < 1e-6


def test_fd_check_rejects_float32():
    x = Tensor(np.ones(3, dtype=np.float32))
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: tensor_sum(t), x)


@pytest.mark.parametrize(
    "name,fn,shape",
    [
        ("matmul", lambda x: tensor_sum(matmul(x, transpose(x))), (3, 4)),
        ("conv2d", None, (1, 2, 5, 5)),  # handled below
        ("max_pool2d", lambda x: tensor_sum(max_pool2d(x, 2, 1)), (1, 2, 5, 5)),
        ("global_max_pool", lambda x: tensor_sum(global_max_pool(x)), (2, 3, 4, 4)),
        ("relu", lambda x: tensor_sum(relu(x) * relu(x)), (4, 4)),
        ("sigmoid", lambda x: tensor_sum(sigmoid(x)), (3, 3)),
        ("tanh", lambda x: tensor_sum(tanh(x)), (3, 3)),
        ("softmax", lambda x: tensor_sum(softmax(x) * softmax(x)), (3, 4)),
        ("mean", lambda x: tensor_mean(x * x), (3, 5)),
        ("transpose", lambda x: tensor_sum(transpose(x) * transpose(x)), (2, 4)),
        ("reshape", lambda x: tensor_sum(x.reshape((6,)) * x.reshape((6,))), (2, 3)),
        ("concat", lambda x: tensor_sum(mul_self(concat([x, x * 2.0], axis=0))), (2, 2)),
        ("div", lambda x: tensor_sum(x / (x * x + 2.0)), (3, 3)),
        ("exp_log_sqrt", None, (4,)),  # handled below
    ],
)
def test_every_op_gradient_matches_finite_differences(name, fn, shape):
    rng = np.random.default_rng(hash(name) % 2**32)
    x = rng.standard_normal(shape) + 0.1  # nudge off relu/pool kinks
    if name == "conv2d":
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def fn_x(t):
            return tensor_sum(conv2d(t, t64(w), t64(b), stride=1, padding=1))

        assert finite_difference_check(fn_x, t64(x)) < 1e-4

        def fn_w(t):
            return tensor_sum(conv2d(t64(x), t, t64(b), stride=1, padding=1)
                              * conv2d(t64(x), t, t64(b), stride=1, padding=1))

        assert finite_difference_check(fn_w, t64(w)) < 1e-4

        def fn_b(t):
            return tensor_sum(conv2d(t64(x), t64(w), t, stride=2, padding=0))

        assert finite_difference_check(fn_b, t64(b)) < 1e-4
        return
    if name == "exp_log_sqrt":
        from rcfusion import exp, log, sqrt

        base = np.abs(rng.standard_normal(shape)) + 0.5
        assert finite_difference_check(lambda t: tensor_sum(exp(t)), t64(x)) < 1e-4
        assert finite_difference_check(lambda t: tensor_sum(log(t)), t64(base)) < 1e-4
        assert finite_difference_check(lambda t: tensor_sum(sqrt(t)), t64(base)) < 1e-4
        return
    assert finite_difference_check(fn, t64(x)) < 1e-4


# ---------------------------------------------------------------------------
# construction rules and determinism

def test_positive_dims_enforced():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0, 3)))


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(2, dtype=np.float32))
    b = Tensor(np.ones(2, dtype=np.float64))
    with pytest.raises(ValueError):
        a + b


def test_grad_shape_and_dtype_match():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    backward(tensor_sum(x * x))
    assert x.grad.shape == x.shape
    assert x.grad.dtype == x.dtype


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(99)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)

    def run():
        out = conv2d(t64(x), t64(w), t64(b), stride=1, padding=1)
        out = max_pool2d(relu(out), 2, 2)
        return tensor_sum(out).data.tobytes()

    assert run() == run()


def test_nan_debug_checks():
    from rcfusion import set_nan_checks, log

    set_nan_checks(True)
    try:
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError):
                log(t64([-1.0], requires_grad=True))
    finally:
        set_nan_checks(False)


# ---------------------------------------------------------------------------
# RCFT tensor file format

def test_rcft_layout_bytes():
    t = Tensor(np.array([1.0, 2.0], dtype=np.float32))
    buf = io.BytesIO()
    rcft.write_tensor(buf, t)
    raw = buf.getvalue()
    assert raw[:4] == b"RCFT"
    assert raw[4] == 0  # f32
    assert raw[5] == 1  # rank
    assert int.from_bytes(raw[6:14], "little") == 2
    assert np.frombuffer(raw[14:], dtype="<f4").tolist() == [1.0, 2.0]


def test_rcft_round_trip_exact():
    rng = np.random.default_rng(31)
    for dtype in (np.float32, np.float64):
        arr = rng.standard_normal((3, 4, 2)).astype(dtype)
        buf = io.BytesIO()
        rcft.write_tensor(buf, Tensor(arr))
        buf.seek(0)
        back = rcft.read_tensor(buf)
        assert back.dtype == dtype
        assert back.tobytes() == arr.tobytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(37)
    named = [
        ("stem.weight", Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))),
        ("stem.bias", Tensor(rng.standard_normal(4).astype(np.float32))),
        ("head.weight", Tensor(rng.standard_normal((2, 4)).astype(np.float64))),
    ]
    path = tmp_path / "model.ckpt"
    rcft.save_checkpoint(path, named)
    loaded = rcft.load_checkpoint(path)
    assert list(loaded) == [n for n, _ in named]
    for name, t in named:
        assert loaded[name].tobytes() == t.data.tobytes()
    # a second save of the loaded state is byte-identical
    path2 = tmp_path / "model2.ckpt"
    rcft.save_checkpoint(path2, list(loaded.items()))
    assert path.read_bytes() == path2.read_bytes()
