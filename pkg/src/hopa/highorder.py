"""High-order feature maps from rank-decomposed polynomial kernels.

A degree-r monomial feature of a pixel vector x is a product of r linear
projections of x.  Keeping D such features per degree gives, per pixel,

    z[r][d] = prod_{s=1..r} <u[r][d][s], x>,    d = 1..D^r

which is a rank-D decomposition of a degree-r polynomial kernel.  Each
projection bank u[r][s] is a bias-free 1x1 convolution producing D^r channels,
so z[r] is the elementwise product of r conv outputs.  A 1x1 mixing conv (with
bias) then maps each z[r] to a common width and the per-degree branches are
concatenated after ReLU.  Nothing here looks at neighbouring pixels: spatial
context is the backbone's job, this module only enriches per-pixel statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Conv2dParams, Tensor, concat_channels, conv2d, conv_params, eltwise_mul, relu

__all__ = ["HrParams", "hr_params", "hr_project", "hr_forward", "hr_predictor_check", "hr_named_params"]


@dataclass
class HrParams:
    """Projection banks and mixing convs for degrees 1..order.

    proj[r] is a list of r bias-free 1x1 convs, each c_in -> rank[r].
    mix[r] is a 1x1 conv rank[r] -> out_width with bias.
    """

    order: int
    in_channels: int
    rank: dict[int, int]
    out_width: int
    proj: dict[int, list[Conv2dParams]] = field(default_factory=dict)
    mix: dict[int, Conv2dParams] = field(default_factory=dict)


def hr_params(
    in_channels: int,
    rng: np.random.Generator,
    order: int = 3,
    rank: int | dict[int, int] = 8,
    out_width: int = 8,
) -> HrParams:
    """Build parameters; ``rank`` may be a single width or a per-degree map."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    ranks = {r: (rank[r] if isinstance(rank, dict) else int(rank)) for r in range(1, order + 1)}
    p = HrParams(order=order, in_channels=in_channels, rank=ranks, out_width=out_width)
    for r in range(1, order + 1):
        p.proj[r] = [
            conv_params(in_channels, ranks[r], kernel=1, rng=rng, bias=False)
            for _ in range(r)
        ]
        p.mix[r] = conv_params(ranks[r], out_width, kernel=1, rng=rng, bias=True)
    return p


def hr_project(x: Tensor, p: HrParams) -> dict[int, Tensor]:
    """Degree maps z[r]: elementwise product of the r projection outputs.

    Bias-free projections make each z[r] homogeneous of degree r:
    z[r](t*x) == t**r * z[r](x).
    """
    if x.data.ndim != 4 or x.data.shape[1] != p.in_channels:
        raise ValueError(
            f"hr_project expects (n, {p.in_channels}, h, w), got shape {x.data.shape}"
        )
    z = {}
    for r in range(1, p.order + 1):
        acc = conv2d(x, p.proj[r][0])
        for s in range(1, r):
            acc = eltwise_mul(acc, conv2d(x, p.proj[r][s]))
        z[r] = acc
    return z


def hr_forward(x: Tensor, p: HrParams) -> Tensor:
    """Concatenated per-degree branches: concat_r relu(mix[r](z[r])).

    Output has order * out_width channels at the input's spatial dims.
    With order == 1 this reduces to a plain 1x1-conv -> ReLU bottleneck.
    """
    z = hr_project(x, p)
    branches = [relu(conv2d(z[r], p.mix[r])) for r in range(1, p.order + 1)]
    return concat_channels(branches)


def hr_predictor_check(x_vec: np.ndarray, p: HrParams, readout: dict[int, np.ndarray]) -> float:
    """Difference between the module path and the direct polynomial sum.

    The module path runs hr_project on the single pixel x_vec and dots each
    degree map with readout[r].  The direct path evaluates
    sum_r sum_d readout[r][d] * prod_s <u[r][d][s], x_vec> from the raw
    projection weights.  Both are the same polynomial, so the returned
    difference is numerical noise only.
    """
    x_vec = np.asarray(x_vec, dtype=np.float64).reshape(-1)
    if x_vec.size != p.in_channels:
        raise ValueError(f"x_vec has {x_vec.size} channels, params expect {p.in_channels}")
    x = Tensor(x_vec.reshape(1, p.in_channels, 1, 1))
    z = hr_project(x, p)
    module_value = 0.0
    for r in range(1, p.order + 1):
        module_value += float(np.dot(readout[r], z[r].data[0, :, 0, 0]))

    direct_value = 0.0
    for r in range(1, p.order + 1):
        prod = np.ones(p.rank[r])
        for s in range(r):
            u = p.proj[r][s].weight.data[:, :, 0, 0]  # (rank, c_in)
            prod = prod * (u @ x_vec)
        direct_value += float(np.dot(readout[r], prod))

    return module_value - direct_value


def hr_named_params(prefix: str, p: HrParams):
    """Checkpoint naming: {prefix}.proj.{r}.{s} and {prefix}.mix.{r}[.bias]."""
    out = []
    for r in range(1, p.order + 1):
        for s, proj in enumerate(p.proj[r], start=1):
            out.append((f"{prefix}.proj.{r}.{s}", proj.weight))
        out.append((f"{prefix}.mix.{r}", p.mix[r].weight))
        out.append((f"{prefix}.mix.{r}.bias", p.mix[r].bias))
    return out
