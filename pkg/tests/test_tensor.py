"""Autodiff core: forward values against naive oracles, gradients against
central finite differences."""

import numpy as np
import pytest

from hopa.tensor import (
    BatchNormParams,
    Conv2dParams,
    Tensor,
    add,
    backward,
    batch_norm,
    bilinear_resize,
    bn_params,
    concat_channels,
    conv2d,
    conv_output_size,
    conv_params,
    eltwise_mul,
    global_avg_pool,
    grad_enabled,
    max_pool,
    mean_all,
    no_grad,
    relu,
    resize_matrix,
    same_padding,
    sum_all,
    zero_grad,
)

from helpers import gradcheck, naive_conv2d


# ---------------------------------------------------------------------------
# convolution forward


def test_conv2d_matches_naive_oracle_across_geometries():
    rng = np.random.default_rng(11)
    cases = 0
    for dilation in (1, 2, 3, 6):
        for stride in (1, 2):
            for kernel in (1, 3):
                for use_bias in (False, True):
                    if kernel == 1 and dilation > 1:
                        continue
                    for pad in {0, same_padding(kernel, dilation)}:
                        h = int(rng.integers(kernel + (kernel - 1) * (dilation - 1), 14))
                        w = int(rng.integers(kernel + (kernel - 1) * (dilation - 1), 14))
                        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
                        x = rng.normal(size=(2, c_in, h, w))
                        wt = rng.normal(size=(c_out, c_in, kernel, kernel))
                        b = rng.normal(size=c_out) if use_bias else None
                        p = Conv2dParams(
                            weight=Tensor(wt),
                            bias=Tensor(b) if use_bias else None,
                            stride=stride,
                            dilation=dilation,
                            padding=pad,
                        )
                        got = conv2d(Tensor(x), p).data
                        want = naive_conv2d(x, wt, b, stride, dilation, pad)
                        assert got.shape == want.shape
                        assert np.abs(got - want).max() < 1e-12
                        cases += 1
    assert cases >= 36


def test_conv_output_size_matches_actual_shapes():
    rng = np.random.default_rng(5)
    for _ in range(30):
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.choice([1, 2, 3]))
        s = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 3))
        h = int(rng.integers(d * (k - 1) + 1, 16))
        x = Tensor(rng.normal(size=(1, 2, h, h)))
        p = Conv2dParams(weight=Tensor(rng.normal(size=(3, 2, k, k))),
                         stride=s, dilation=d, padding=pad)
        out = conv2d(x, p)
        assert out.data.shape[2] == conv_output_size(h, k, s, d, pad)


def test_conv2d_channel_mismatch_names_both_shapes():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    p = Conv2dParams(weight=Tensor(np.zeros((2, 4, 3, 3))))
    with pytest.raises(ValueError) as err:
        conv2d(x, p)
    assert "(1, 3, 5, 5)" in str(err.value) and "(2, 4, 3, 3)" in str(err.value)


def test_conv2d_rejects_rank3_input_and_empty_output():
    p = Conv2dParams(weight=Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="rank-4"):
        conv2d(Tensor(np.zeros((1, 5, 5))), p)
    with pytest.raises(ValueError, match="empty output"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), p)


def test_same_padding_preserves_spatial_dims():
    rng = np.random.default_rng(2)
    for kernel, dilation in [(3, 1), (3, 2), (3, 6), (1, 1), (5, 2)]:
        pad = same_padding(kernel, dilation)
        x = Tensor(rng.normal(size=(1, 2, 17, 13)))
        p = conv_params(2, 3, kernel, rng, dilation=dilation, padding=pad)
        assert conv2d(x, p).data.shape[2:] == (17, 13)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def test_eltwise_add_relu_values_and_mismatch_errors():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))
    assert np.array_equal(eltwise_mul(Tensor(a), Tensor(b)).data, a * b)
    assert np.array_equal(add(Tensor(a), Tensor(b)).data, a + b)
    assert np.array_equal(relu(Tensor(a)).data, np.maximum(a, 0.0))
    with pytest.raises(ValueError, match="mismatch"):
        eltwise_mul(Tensor(a), Tensor(b[:, :2]))
    with pytest.raises(ValueError, match="mismatch"):
        add(Tensor(a), Tensor(b[:1]))


def test_concat_channels_order_and_mismatch():
    rng = np.random.default_rng(4)
    parts = [rng.normal(size=(1, c, 3, 3)) for c in (2, 1, 4)]
    out = concat_channels([Tensor(p) for p in parts]).data
    assert out.shape == (1, 7, 3, 3)
    assert np.array_equal(out[:, 2:3], parts[1])
    with pytest.raises(ValueError, match="mismatch"):
        concat_channels([Tensor(parts[0]), Tensor(np.zeros((1, 2, 4, 3)))])
    with pytest.raises(ValueError, match="at least one"):
        concat_channels([])


def test_global_avg_pool_value():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 5, 7))
    out = global_avg_pool(Tensor(x)).data
    assert out.shape == (2, 3, 1, 1)
    assert np.allclose(out[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-15)


def test_max_pool_matches_naive_windows():
    rng = np.random.default_rng(7)
    for kernel, stride, pad in [(2, 2, 0), (3, 1, 1), (3, 2, 1)]:
        x = rng.normal(size=(2, 2, 9, 8))
        out = max_pool(Tensor(x), kernel, stride, pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
        oh, ow = out.shape[2:]
        for i in range(oh):
            for j in range(ow):
                window = xp[:, :, i * stride : i * stride + kernel, j * stride : j * stride + kernel]
                assert np.array_equal(out[:, :, i, j], window.max(axis=(2, 3)))
    with pytest.raises(ValueError, match="does not fit"):
        max_pool(Tensor(rng.normal(size=(1, 1, 2, 2))), 3, 1, 0)


# ---------------------------------------------------------------------------
# bilinear resize


def test_resize_matrix_is_row_stochastic_and_identity_when_same():
    for n_in, n_out in [(4, 4), (3, 7), (8, 3), (1, 5), (5, 1)]:
        m = resize_matrix(n_in, n_out)
        assert m.shape == (n_out, n_in)
        assert np.abs(m.sum(axis=1) - 1.0).max() < 1e-12
        assert (m >= 0).all()
    assert np.array_equal(resize_matrix(6, 6), np.eye(6))


def test_bilinear_resize_preserves_constants_and_same_size_exact():
    rng = np.random.default_rng(8)
    const = bilinear_resize(Tensor(np.full((1, 2, 5, 4), 3.25)), 11, 7).data
    assert np.abs(const - 3.25).max() < 1e-12
    x = rng.normal(size=(2, 3, 6, 6))
    assert np.array_equal(bilinear_resize(Tensor(x), 6, 6).data, x)
    with pytest.raises(ValueError, match="target"):
        bilinear_resize(Tensor(x), 0, 4)


def test_bilinear_broadcast_from_single_pixel_is_constant():
    x = np.arange(6.0).reshape(1, 6, 1, 1)
    out = bilinear_resize(Tensor(x), 5, 9).data
    assert np.abs(out - x).max() == 0.0


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_training_normalizes_with_biased_variance():
    rng = np.random.default_rng(9)
    x = rng.normal(loc=1.5, scale=2.0, size=(4, 3, 6, 6))
    p = bn_params(3)
    out = batch_norm(Tensor(x), p, training=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-12
    assert np.abs(out.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4  # eps shifts it slightly
    want = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / np.sqrt(
        x.var(axis=(0, 2, 3), keepdims=True) + p.eps
    )
    assert np.abs(out - want).max() < 1e-12


def test_batch_norm_running_stats_update_rule():
    rng = np.random.default_rng(10)
    x = rng.normal(loc=-0.7, scale=1.3, size=(2, 2, 5, 5))
    p = bn_params(2)
    p.running_mean[:] = (0.3, -0.1)
    p.running_var[:] = (2.0, 0.5)
    before_mean, before_var = p.running_mean.copy(), p.running_var.copy()
    batch_norm(Tensor(x), p, training=True)
    mu, var = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    assert np.allclose(p.running_mean, 0.9 * before_mean + 0.1 * mu, atol=1e-15)
    assert np.allclose(p.running_var, 0.9 * before_var + 0.1 * var, atol=1e-15)


def test_batch_norm_eval_is_frozen_affine():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(2, 2, 4, 4))
    p = bn_params(2)
    p.gamma.data[:] = (2.0, -1.0)
    p.beta.data[:] = (0.5, 0.25)
    p.running_mean[:] = (1.0, -2.0)
    p.running_var[:] = (4.0, 9.0)
    out = batch_norm(Tensor(x), p, training=False).data
    for c in range(2):
        want = p.gamma.data[c] * (x[:, c] - p.running_mean[c]) / np.sqrt(
            p.running_var[c] + p.eps
        ) + p.beta.data[c]
        assert np.abs(out[:, c] - want).max() < 1e-12
    # buffers untouched in eval mode
    assert np.array_equal(p.running_mean, [1.0, -2.0])


def test_batch_norm_channel_mismatch_error():
    p = bn_params(3)
    with pytest.raises(ValueError, match="channel mismatch"):
        batch_norm(Tensor(np.zeros((1, 2, 4, 4))), p, training=True)


# ---------------------------------------------------------------------------
# backward machinery


def test_backward_requires_scalar_shape():
    x = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    y = relu(x)
    with pytest.raises(ValueError, match=r"\(1, 1, 1, 1\)"):
        backward(y)


def test_backward_accumulates_and_zero_grad_resets():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    loss = sum_all(eltwise_mul(x, x))
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    assert np.allclose(x.grad, 2.0 * first, atol=1e-15)
    zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_gradient_sums_both_paths():
    # y = x*x + x  =>  dy/dx = 2x + 1
    x = Tensor(np.array([[[[3.0]]]]), requires_grad=True)
    loss = sum_all(add(eltwise_mul(x, x), x))
    backward(loss)
    assert np.allclose(x.grad, 7.0, atol=1e-15)


def test_no_grad_blocks_graph_recording():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    assert grad_enabled()
    with no_grad():
        assert not grad_enabled()
        y = relu(x)
    assert not y.requires_grad and y._parents == ()
    y2 = relu(x)
    assert y2.requires_grad


def test_mean_all_and_sum_all_values():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 3, 4, 5))
    assert np.isclose(sum_all(Tensor(x)).data.reshape(()), x.sum(), atol=1e-12)
    assert np.isclose(mean_all(Tensor(x)).data.reshape(()), x.mean(), atol=1e-14)


# ---------------------------------------------------------------------------
# per-operator gradient checks


def test_gradcheck_conv2d_geometries():
    rng = np.random.default_rng(20)
    for stride, dilation, kernel, use_bias in [
        (1, 1, 3, True), (2, 1, 3, False), (1, 2, 3, True),
        (2, 3, 3, True), (1, 6, 3, False), (1, 1, 1, True),
    ]:
        pad = same_padding(kernel, dilation)
        x = Tensor(rng.normal(size=(2, 2, 13, 13)), requires_grad=True)
        p = conv_params(2, 3, kernel, rng, stride=stride, dilation=dilation,
                        padding=pad, bias=use_bias)
        tensors = [x, p.weight] + ([p.bias] if use_bias else [])
        gradcheck(lambda: sum_all(eltwise_mul(conv2d(x, p), conv2d(x, p))), tensors, rng)


def test_gradcheck_elementwise_and_pooling_ops():
    rng = np.random.default_rng(21)
    a = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    gradcheck(lambda: sum_all(eltwise_mul(eltwise_mul(a, b), b)), [a, b], rng)
    gradcheck(lambda: sum_all(eltwise_mul(add(a, b), a)), [a, b], rng)
    gradcheck(lambda: sum_all(eltwise_mul(relu(a), relu(a))), [a], rng)
    pool_w = Tensor(rng.normal(size=(2, 3, 1, 1)))
    gradcheck(lambda: sum_all(eltwise_mul(global_avg_pool(eltwise_mul(a, a)), pool_w)), [a], rng)
    gradcheck(lambda: sum_all(eltwise_mul(max_pool(a, 3, 2, 1), max_pool(a, 3, 2, 1))), [a], rng)
    gradcheck(lambda: mean_all(eltwise_mul(bilinear_resize(a, 9, 4), bilinear_resize(a, 9, 4))), [a], rng)
    c = Tensor(rng.normal(size=(2, 1, 6, 6)), requires_grad=True)
    gradcheck(lambda: sum_all(eltwise_mul(concat_channels([a, c]), concat_channels([a, c]))), [a, c], rng)


def test_gradcheck_batch_norm_training_and_eval():
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(3, 2, 5, 5)), requires_grad=True)
    p = bn_params(2)
    p.gamma.data[:] = rng.normal(size=2)
    p.beta.data[:] = rng.normal(size=2)

    def train_loss():
        # snapshot running stats so repeated evaluation stays a pure function
        saved = (p.running_mean.copy(), p.running_var.copy())
        out = batch_norm(x, p, training=True)
        loss = sum_all(eltwise_mul(out, out))
        p.running_mean[:], p.running_var[:] = saved
        return loss

    gradcheck(train_loss, [p.gamma, p.beta, x], rng)
    p.running_mean[:] = rng.normal(size=2)
    p.running_var[:] = (0.7, 2.1)
    gradcheck(lambda: sum_all(eltwise_mul(batch_norm(x, p, training=False),
                                          batch_norm(x, p, training=False))),
              [p.gamma, p.beta, x], rng)
