"""Shared oracles for the test suite.

The reference implementations here are deliberately slow and dumb: the naive
convolution walks every output element with Python loops, and the gradient
checker perturbs one scalar at a time.  They share no code with the package
beyond numpy, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import numpy as np

from hopa.tensor import Tensor, backward, zero_grad

FD_STEP = 1e-5
FD_RTOL = 1e-4
# central differences on float64 bottom out around 1e-7 even for a perfect
# gradient; differences below this are noise, not disagreement
FD_ATOL = 1e-6


def naive_conv2d(x, weight, bias=None, stride=1, dilation=1, padding=0):
    """Quadruple-loop cross-correlation over an NCHW array."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    assert c_in == c_in_w, "channel mismatch in test oracle"
    xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (
                                    weight[co, ci, u, v]
                                    * xp[b, ci, i * stride + u * dilation, j * stride + v * dilation]
                                )
                    out[b, co, i, j] = acc
            if bias is not None:
                out[b, co] += bias[co]
    return out


def fd_ok(fd: float, an: float, rtol: float = FD_RTOL, atol: float = FD_ATOL) -> bool:
    """Pass when the values agree relatively, or are both below FD noise."""
    return abs(fd - an) <= max(rtol * max(abs(fd), abs(an)), atol)


def gradcheck(build_loss, tensors, rng, samples_per_tensor=5, h=FD_STEP,
              rtol=FD_RTOL, atol=FD_ATOL):
    """Check analytic gradients of scalar-valued build_loss against FD.

    build_loss() must rebuild the graph from the current tensor contents and
    return a scalar Tensor.  For each tensor a handful of entries are probed
    with central differences.  Returns the worst (fd, an, where) triple seen;
    raises AssertionError on disagreement.
    """
    tensors = [t for t in tensors if t is not None]
    loss = build_loss()
    zero_grad(tensors)
    backward(loss)
    grads = [t.grad.copy() for t in tensors]

    worst = (0.0, 0.0, "none")
    worst_gap = -1.0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        n_probe = min(samples_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=n_probe, replace=False)
        for idx in idxs:
            keep = flat[idx]
            flat[idx] = keep + h
            fp = float(build_loss().data.reshape(()))
            flat[idx] = keep - h
            fm = float(build_loss().data.reshape(()))
            flat[idx] = keep
            fd = (fp - fm) / (2.0 * h)
            an = float(grads[ti].reshape(-1)[idx])
            gap = abs(fd - an) / max(rtol * max(abs(fd), abs(an)), atol)
            if gap > worst_gap:
                worst_gap = gap
                worst = (fd, an, f"tensor {ti} entry {int(idx)}")
            assert fd_ok(fd, an, rtol, atol), (
                f"gradient mismatch at tensor {ti} entry {int(idx)}: fd={fd!r} analytic={an!r}"
            )
    return worst


def rf_recurrence(layers):
    """Independent jump/receptive-field recurrence over (k, stride, dilation)."""
    jump, rf = 1, 1
    for k, stride, dilation in layers:
        rf = rf + (k - 1) * dilation * jump
        jump = jump * stride
    return jump, rf


def perturb(params, rng, scale=0.05):
    """Knock every tensor off its structured init (zeros/ones hit relu kinks
    and batch-norm fixed points, where finite differences are meaningless)."""
    for _name, t in params:
        t.data += rng.normal(scale=scale, size=t.data.shape)
