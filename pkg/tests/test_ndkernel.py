import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamgap import ndkernel as nk
from siamgap.errors import DimensionError, NumericError, UsageError
from siamgap.ndkernel import _backend, _npkernels


def conv_oracle(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, h, wd = xp.shape
    co, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    return out + b.reshape(1, -1, 1, 1)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv2d_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = nk.conv2d(x, w, b, stride=stride, padding=padding).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv2d_is_linear_in_input():
    rng = np.random.default_rng(1)
    x1, x2 = rng.standard_normal((2, 2, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    lhs = nk.conv2d(2.0 * x1 - 3.0 * x2, w, padding=1).data
    rhs = 2.0 * nk.conv2d(x1, w, padding=1).data - 3.0 * nk.conv2d(x2, w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv2d_dimension_errors_name_the_axis():
    x = np.zeros((1, 3, 5, 5))
    with pytest.raises(DimensionError, match="axis 1"):
        nk.conv2d(x, np.zeros((2, 4, 3, 3)))
    with pytest.raises(DimensionError, match="axis 2"):
        nk.conv2d(np.zeros((1, 3, 2, 5)), np.zeros((2, 3, 3, 3)))
    with pytest.raises(DimensionError, match="axis 1"):
        nk.affine(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(3, 12), w=st.integers(3, 12),
    k=st.integers(1, 3), stride=st.integers(1, 3), f32=st.booleans(),
)
def test_backends_agree_bitwise(n, c, h, w, k, stride, f32):
    if _backend.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    c_im2col, c_col2im = _backend.kernels("cython")
    dtype = np.float32 if f32 else np.float64
    rng = np.random.default_rng(n * 1000 + c * 100 + h * 10 + w)
    x = rng.standard_normal((n, c, h, w)).astype(dtype)
    a = _npkernels.im2col(x, k, k, stride)
    b = c_im2col(x, k, k, stride)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    cols = rng.standard_normal(a.shape).astype(dtype)
    assert np.array_equal(
        _npkernels.col2im(cols, n, c, h, w, k, k, stride), c_col2im(cols, n, c, h, w, k, k, stride)
    )


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 6))
    cols = _backend.im2col(x, 3, 3, 2)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * _backend.col2im(y, 2, 3, 7, 6, 3, 3, 2))
    assert abs(lhs - rhs) < 1e-10


def test_pure_python_fallback_selected_by_env():
    env = dict(os.environ, SIAMGAP_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from siamgap import ndkernel; print(ndkernel.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


# ------------------------------------------------------------------- tape

def test_scalar_chain_rule():
    x = nk.Tensor(3.0, requires_grad=True)
    with nk.Tape() as tape:
        y = x * x + 2.0 * x
    tape.backward(y)
    assert float(x.grad) == 8.0


def test_reused_input_accumulates():
    x = nk.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.mul(x, x) + nk.mul(x, 3.0) + x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, 2 * x.data + 4.0)


def test_backward_twice_needs_reset():
    x = nk.Tensor(1.0, requires_grad=True)
    with nk.Tape() as tape:
        y = x * 2.0
    tape.backward(y)
    with pytest.raises(UsageError):
        tape.backward(y)
    tape.reset()
    assert len(tape) == 0


def test_nothing_recorded_outside_tape_or_without_grad():
    x = nk.Tensor(np.ones(3), requires_grad=True)
    y = nk.mul(x, 2.0)
    assert not y.requires_grad
    with nk.Tape() as tape:
        nk.mul(np.ones(3), 2.0)
    assert len(tape) == 0


def test_backward_needs_scalar():
    x = nk.Tensor(np.ones(3), requires_grad=True)
    with nk.Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_intermediate_grad_only_when_retained():
    x = nk.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with nk.Tape() as tape:
        h = nk.mul(x, 3.0).retain_grad()
        k = nk.mul(h, 2.0)
        y = nk.tsum(nk.mul(k, k))
    tape.backward(y)
    np.testing.assert_allclose(h.grad, 8.0 * h.data)
    assert k.grad is None


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        nk.Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        nk.Tensor(np.inf)


# ---------------------------------------------------------------- primitives

def test_softmax_rows_and_stability():
    z = np.array([[1000.0, 0.0], [-1000.0, -999.0], [0.3, 0.3]])
    p = nk.softmax(z).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(p[2], [0.5, 0.5])
    with pytest.raises(DimensionError):
        nk.softmax(np.zeros((2, 1)))


def test_batch_norm_statistics():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    stats = nk.BatchNormStats(2)
    out = nk.batch_norm(x, np.ones(2), np.zeros(2), stats, training=True, momentum=0.5).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    np.testing.assert_allclose(stats.mean, 0.5 * x.mean(axis=(0, 2, 3)))
    unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(stats.var, 0.5 + 0.5 * unbiased)
    ev = nk.batch_norm(x, np.ones(2), np.zeros(2), stats, training=False).data
    expect = (x - stats.mean.reshape(1, 2, 1, 1)) / np.sqrt(stats.var.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(ev, expect)


def test_global_pools():
    x = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
    np.testing.assert_array_equal(nk.global_average_pool(x).data, x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(nk.global_max_pool(x).data, x.max(axis=(2, 3)))


def test_global_max_pool_tie_goes_to_first():
    x = nk.Tensor(np.array([[[[1.0, 5.0], [5.0, 0.0]]]]), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.global_max_pool(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_relu_and_clip_gradients_at_boundaries():
    x = nk.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.relu(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])
    z = nk.Tensor(np.array([-2.0, 0.1, 3.0]), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.clip(z, -1.0, 1.0))
    tape.backward(y)
    np.testing.assert_array_equal(z.grad, [0.0, 1.0, 0.0])


def test_dropout_modes():
    x = np.ones((200, 50))
    np.testing.assert_array_equal(nk.dropout(x, 0.5, None, training=False).data, x)
    y = nk.dropout(x, 0.2, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert abs(y.mean() - 1.0) < 0.02
    again = nk.dropout(x, 0.2, np.random.default_rng(0)).data
    np.testing.assert_array_equal(y, again)


def test_take_rows_repeated_rows_accumulate():
    x = nk.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.take_rows(x, [0, 0, 2]))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_broadcast_gradients_reduce_to_input_shape():
    rng = np.random.default_rng(4)
    a = nk.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = nk.Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    with nk.Tape() as tape:
        y = nk.tsum(nk.mul(a, b))
    tape.backward(y)
    assert b.grad.shape == (1, 3)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True))


# --------------------------------------------------------------- gradcheck

def test_gradcheck_negative_control():
    f = lambda t: nk.tsum(nk.mul(t, t))  # noqa: E731
    x = np.array([1.0, -2.0, 0.5])
    good = nk.finite_difference_check(f, x, tolerance=1e-6)
    assert good.passed and good.n_checked == 3
    bad = nk.finite_difference_check(f, x, tolerance=1e-6, analytic=2 * x + 1e-3)
    assert not bad.passed
    part = nk.finite_difference_check(f, x, coords=[1])
    assert part.n_checked == 1


@pytest.mark.parametrize("name", ["b1.l1.conv.weight", "b3.l2.bn.gamma", "head.weight"])
def test_whole_network_gradient(name):
    from siamgap.model import ModelConfig, build_model

    model = build_model(ModelConfig.desk(input_size=8, block_channels=(2, 2, 2, 2)), 0)
    rng = np.random.default_rng(5)
    lat, med = rng.random((2, 4, 1, 8, 8))
    point = model.params[name].data.copy()

    def f(param):
        model.params[name] = param
        probs, _ = model.forward(lat, med, training=True, rng=np.random.default_rng(0))
        return nk.tsum(nk.log(nk.gather(probs, np.array([0, 1, 1, 0]))))

    rep = nk.finite_difference_check(f, point, tolerance=1e-4)
    assert rep.passed, rep
