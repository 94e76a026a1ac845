"""Rank-4 float64 tensors with reverse-mode automatic differentiation.

Every value flowing through a network here is a ``Tensor`` holding a
``(batch, channel, height, width)`` float64 array.  Parameters reuse the same
class with their natural layouts (conv weights are ``(c_out, c_in, k, k)``,
biases and batch-norm scales are 1-D).  Operations build a graph of closures;
``backward`` on a scalar ``(1, 1, 1, 1)`` tensor walks it in reverse
topological order and accumulates ``d(loss)/d(tensor)`` into ``.grad`` of every
tensor that requires gradients.  Repeated backward calls keep accumulating, so
callers reset with ``zero_grad`` between steps.

Ops are pure with respect to their tensor inputs (batch_norm additionally
updates the running statistics held in its parameter struct when training).
Graphs are built per call, so separate threads may run backward on disjoint
graphs; the grad-recording switch is thread-local.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Tensor",
    "Conv2dParams",
    "BatchNormParams",
    "conv2d",
    "conv_params",
    "bn_params",
    "same_padding",
    "eltwise_mul",
    "add",
    "relu",
    "concat_channels",
    "batch_norm",
    "global_avg_pool",
    "max_pool",
    "bilinear_resize",
    "sum_all",
    "mean_all",
    "backward",
    "zero_grad",
    "no_grad",
    "grad_enabled",
    "resize_matrix",
    "conv_output_size",
]

_state = threading.local()


def grad_enabled() -> bool:
    """True when new ops should record graph edges (thread-local)."""
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap op output, recording the edge when grads are on and needed."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Backpropagate from a scalar (1,1,1,1) tensor.

    Gradients accumulate into ``.grad`` of every requires_grad tensor reachable
    from ``loss``; calling twice without ``zero_grad`` doubles them.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ValueError(
            f"backward needs a scalar (1, 1, 1, 1) tensor, got shape {loss.data.shape}"
        )
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    flows = {id(loss): np.ones((1, 1, 1, 1))}
    for node in reversed(order):
        gy = flows.pop(id(node), None)
        if gy is None:
            continue
        if node.requires_grad:
            node.accumulate_grad(gy)
        if node._backward is None:
            continue
        grads = node._backward(gy)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + g
            else:
                flows[key] = g


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


def _require_nchw(x: Tensor, op: str) -> tuple:
    if x.data.ndim != 4:
        raise ValueError(f"{op} expects a rank-4 (n, c, h, w) tensor, got shape {x.data.shape}")
    return x.data.shape


# ---------------------------------------------------------------------------
# parameter structs


@dataclass
class Conv2dParams:
    """Weights plus geometry for a 2-D convolution (cross-correlation).

    weight: (c_out, c_in, k_h, k_w); bias: (c_out,) or None.  Padding is
    zero-fill on both sides of each spatial axis.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    dilation: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics.

    Running stats are plain arrays: they are state, not graph leaves.  Biased
    variance is used both for normalization and for the running update.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that keeps spatial dims for odd kernels at stride 1."""
    return dilation * (kernel - 1) // 2


def conv_params(
    c_in: int,
    c_out: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int = 1,
    dilation: int = 1,
    padding: int | None = None,
    bias: bool = True,
) -> Conv2dParams:
    """Fan-in Gaussian init (variance 2/fan_in), zero bias."""
    fan_in = c_in * kernel * kernel
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    if padding is None:
        padding = same_padding(kernel, dilation)
    return Conv2dParams(
        weight=Tensor(w, requires_grad=True),
        bias=b,
        stride=stride,
        dilation=dilation,
        padding=padding,
    )


def bn_params(channels: int, gamma_init: float = 1.0) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.full(channels, float(gamma_init)), requires_grad=True),
        beta=Tensor(np.zeros(channels), requires_grad=True),
        running_mean=np.zeros(channels),
        running_var=np.ones(channels),
    )


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col_view(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, oh: int, ow: int):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Strided, dilated, zero-padded cross-correlation over NCHW input."""
    n, c_in, h, w = _require_nchw(x, "conv2d")
    c_out, c_in_w, kh, kw = p.weight.data.shape
    if c_in != c_in_w:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.data.shape} vs weight shape {p.weight.data.shape}"
        )
    if p.stride < 1 or p.dilation < 1 or p.padding < 0:
        raise ValueError(
            f"conv2d needs stride/dilation >= 1 and padding >= 0, got "
            f"stride={p.stride} dilation={p.dilation} padding={p.padding}"
        )
    oh = conv_output_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_output_size(w, kw, p.stride, p.dilation, p.padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d produces empty output: input shape {x.data.shape}, weight shape "
            f"{p.weight.data.shape}, stride={p.stride} dilation={p.dilation} padding={p.padding}"
        )

    pad = p.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col_view(xp, kh, kw, p.stride, p.dilation, oh, ow)
    out = np.tensordot(p.weight.data, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if p.bias is not None:
        out += p.bias.data.reshape(1, c_out, 1, 1)

    stride, dilation = p.stride, p.dilation
    weight, bias = p.weight, p.bias

    def bwd(gy):
        cols_b = _im2col_view(xp, kh, kw, stride, dilation, oh, ow)
        gw = np.tensordot(gy, cols_b, axes=([0, 2, 3], [0, 4, 5]))
        gb = gy.sum(axis=(0, 2, 3)) if bias is not None else None
        gcols = np.tensordot(weight.data, gy, axes=(0, 1))  # (c_in, kh, kw, n, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[
                    :,
                    :,
                    i * dilation : i * dilation + stride * oh : stride,
                    j * dilation : j * dilation + stride * ow : stride,
                ] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bwd)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def eltwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"eltwise_mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def bwd(gy):
        return gy * b.data, gy * a.data

    return _node(a.data * b.data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def bwd(gy):
        return gy, gy

    return _node(a.data + b.data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(gy):
        return (gy * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), bwd)


def concat_channels(tensors) -> Tensor:
    """Concatenate along the channel axis, preserving argument order."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ValueError(f"concat_channels mismatch: {base} vs {s}")
    sizes = [t.data.shape[1] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(gy):
        return tuple(np.split(gy, splits, axis=1))

    return _node(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _require_nchw(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(gy):
        return (np.broadcast_to(gy / (h * w), (n, c, h, w)).copy(),)

    return _node(out, (x,), bwd)


def max_pool(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max pooling; padding uses -inf so borders never win spuriously."""
    n, c, h, w = _require_nchw(x, "max_pool")
    oh = conv_output_size(h, kernel, stride, 1, padding)
    ow = conv_output_size(w, kernel, stride, 1, padding)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"max_pool window (k={kernel}, stride={stride}) does not fit input shape {x.data.shape}"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    windows = _im2col_view(xp, kernel, kernel, stride, 1, oh, ow)
    # windows: (n, c, k, k, oh, ow) -> flatten the window axes for argmax
    flat = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(gy):
        gxp = np.zeros(xp.shape)
        ki, kj = np.divmod(idx, kernel)
        ni, ci, oy, ox = np.indices(idx.shape, sparse=False)
        np.add.at(gxp, (ni, ci, oy * stride + ki, ox * stride + kj), gy)
        if padding:
            return (gxp[:, :, padding : padding + h, padding : padding + w],)
        return (gxp,)

    return _node(out, (x,), bwd)


@lru_cache(maxsize=512)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear interpolation matrix.

    Sample positions follow the half-pixel convention: source coordinate of
    output index i is (i + 0.5) * n_in / n_out - 0.5, clamped to the valid
    range.  n_in == n_out yields the identity, so same-size resize is exact.
    """
    if n_in == n_out:
        return np.eye(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    mat.setflags(write=False)
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize (half-pixel alignment) to (out_h, out_w)."""
    n, c, h, w = _require_nchw(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize target ({out_h}, {out_w}) invalid for input {x.data.shape}")
    ah = resize_matrix(h, out_h)
    aw = resize_matrix(w, out_w)
    out = np.einsum("ij,ncjk,lk->ncil", ah, x.data, aw, optimize=True)

    def bwd(gy):
        return (np.einsum("ij,ncil,lk->ncjk", ah, gy, aw, optimize=True),)

    return _node(out, (x,), bwd)


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics over (n, h, w) and updates
    the running buffers in place: running = (1 - momentum)*running + momentum*batch.
    Eval mode is the affine map frozen from the running statistics.
    """
    n, c, h, w = _require_nchw(x, "batch_norm")
    if p.gamma.data.shape != (c,):
        raise ValueError(
            f"batch_norm channel mismatch: input shape {x.data.shape} vs gamma shape {p.gamma.data.shape}"
        )
    gamma, beta = p.gamma, p.beta

    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        ivar = 1.0 / np.sqrt(var + p.eps)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
        out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
        p.running_mean[:] = (1.0 - p.momentum) * p.running_mean + p.momentum * mu
        p.running_var[:] = (1.0 - p.momentum) * p.running_var + p.momentum * var

        xc = x.data - mu.reshape(1, c, 1, 1)

        def bwd(gy):
            dgamma = (gy * xhat).sum(axis=(0, 2, 3))
            dbeta = gy.sum(axis=(0, 2, 3))
            dxhat = gy * gamma.data.reshape(1, c, 1, 1)
            dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * -0.5 * ivar**3
            dmu = -(dxhat.sum(axis=(0, 2, 3))) * ivar
            dx = (
                dxhat * ivar.reshape(1, c, 1, 1)
                + (2.0 / m) * dvar.reshape(1, c, 1, 1) * xc
                + dmu.reshape(1, c, 1, 1) / m
            )
            return dx, dgamma, dbeta

        return _node(out, (x, gamma, beta), bwd)

    ivar = 1.0 / np.sqrt(p.running_var + p.eps)
    scale = gamma.data * ivar
    shift = beta.data - scale * p.running_mean
    out = x.data * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)
    xc = x.data - p.running_mean.reshape(1, c, 1, 1)

    def bwd_eval(gy):
        dgamma = (gy * xc).sum(axis=(0, 2, 3)) * ivar
        dbeta = gy.sum(axis=(0, 2, 3))
        dx = gy * scale.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), bwd_eval)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar (1,1,1,1) tensor by summation."""
    shape = x.data.shape

    def bwd(gy):
        return (np.full(shape, gy.reshape(())),)

    return _node(x.data.sum().reshape(1, 1, 1, 1), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    shape = x.data.shape

    def bwd(gy):
        return (np.full(shape, gy.reshape(()) / size),)

    return _node(x.data.mean().reshape(1, 1, 1, 1), (x,), bwd)
