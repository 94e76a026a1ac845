"""Paired atrous spatial pyramid over four feature stages.

Instead of feeding only the deepest stage to an atrous pyramid, each earlier
stage is paired with the last one: V_i4 = concat(Y_i, Y_4) after bilinear
alignment to Y_4's grid.  Five branches are fused:

    U1 = 3x3 atrous conv on V_34      U4 = 3x3 rate-1 conv on Y_4
    U2 = 3x3 atrous conv on V_24      U5 = global-avg-pool -> 1x1 conv on Y_4
    U3 = 3x3 atrous conv on V_14

Branches U1..U4 carry BN + ReLU; U5 is broadcast back to Y_4's dims.  A 1x1
projection (BN + ReLU) fuses the concatenation.  Two rate wirings exist:
combination 1 assigns rates (18, 12, 6) to (V_34, V_24, V_14), combination 2
swaps the 6 and the 18.  Both wirings have identical shapes and parameter
counts; they differ only in which pair receives which rate.

``scale_coverage`` maps a wiring to receptive-field intervals.  A branch is
anchored at the finest statistic it reads (the early stage's receptive field
r_i; r_4 for the Y_4-only branches) and a rate-d 3x3 kernel on a grid with
jump j_4 widens coverage by 2*d*j_4 input pixels, giving [r_i, r_i + 2*d*j_4].
The deep stage's own band belongs to the dedicated rate-1 and pooling
branches, so it is not re-counted per pair.  The pooling branch covers global
context and is excluded from span/overlap arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import StageMetadata
from .tensor import (
    Tensor,
    batch_norm,
    bilinear_resize,
    bn_params,
    concat_channels,
    conv2d,
    conv_params,
    global_avg_pool,
    relu,
)

__all__ = [
    "PairedAsppConfig",
    "PairedAspp",
    "pair",
    "BranchCoverage",
    "ScaleCoverage",
    "scale_coverage",
    "branch_specs",
]


@dataclass(frozen=True)
class PairedAsppConfig:
    """Channel plan and rate wiring for the five branches."""

    in_channels: tuple[int, int, int, int]
    branch_width: int = 16
    fuse_width: int = 32
    combination: int = 1

    def __post_init__(self):
        if self.combination not in (1, 2):
            raise ValueError(f"combination must be 1 or 2, got {self.combination}")


def branch_specs(combination: int):
    """Ordered (kind, stage, rate) for branches U1..U5 of a wiring."""
    if combination == 1:
        pair_rates = {3: 18, 2: 12, 1: 6}
    elif combination == 2:
        pair_rates = {3: 6, 2: 12, 1: 18}
    else:
        raise ValueError(f"combination must be 1 or 2, got {combination}")
    return [
        ("pair", 3, pair_rates[3]),
        ("pair", 2, pair_rates[2]),
        ("pair", 1, pair_rates[1]),
        ("solo", 4, 1),
        ("gap", 4, None),
    ]


def pair(ys) -> tuple[Tensor, Tensor, Tensor]:
    """(V_14, V_24, V_34): each early stage aligned to Y_4 and concatenated.

    Alignment is bilinear resize to Y_4's spatial dims (identity when the
    grids already match).  Channel order is (Y_i, Y_4), so slicing the last
    c_4 channels of any pair recovers Y_4 exactly.
    """
    y1, y2, y3, y4 = ys
    batches = [y.data.shape[0] for y in ys]
    if len(set(batches)) != 1:
        raise ValueError(f"stage maps disagree on batch size: {batches}")
    _, _, h4, w4 = y4.data.shape
    out = []
    for y in (y1, y2, y3):
        aligned = bilinear_resize(y, h4, w4)
        out.append(concat_channels([aligned, y4]))
    return tuple(out)


class PairedAspp:
    """Parameters and forward pass for the five-branch fusion."""

    def __init__(self, cfg: PairedAsppConfig, rng: np.random.Generator):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.in_channels
        pair_in = {1: c1 + c4, 2: c2 + c4, 3: c3 + c4}
        self.branches = []
        for kind, stage, rate in branch_specs(cfg.combination):
            if kind == "pair":
                conv = conv_params(pair_in[stage], cfg.branch_width, 3, rng,
                                   dilation=rate, padding=rate, bias=False)
                self.branches.append((kind, stage, rate, conv, bn_params(cfg.branch_width)))
            elif kind == "solo":
                conv = conv_params(c4, cfg.branch_width, 3, rng, dilation=1, padding=1, bias=False)
                self.branches.append((kind, stage, rate, conv, bn_params(cfg.branch_width)))
            else:  # gap: 1x1 conv with bias, no BN (batch stats degenerate on 1x1 maps)
                conv = conv_params(c4, cfg.branch_width, 1, rng, bias=True)
                self.branches.append((kind, stage, rate, conv, None))
        # training-mode BN cancels this bias; it still shifts eval output
        # through the frozen affine, and the zero-weight case pivots on it
        self.proj = conv_params(5 * cfg.branch_width, cfg.fuse_width, 1, rng, bias=True)
        self.proj_bn = bn_params(cfg.fuse_width)

    def forward(self, ys, training: bool = False) -> Tensor:
        for i, (y, c) in enumerate(zip(ys, self.cfg.in_channels), start=1):
            if y.data.ndim != 4 or y.data.shape[1] != c:
                raise ValueError(
                    f"paired-aspp stage {i} expects {c} channels, got shape {y.data.shape}"
                )
        y4 = ys[3]
        _, _, h4, w4 = y4.data.shape
        v14, v24, v34 = pair(ys)
        pair_inputs = {1: v14, 2: v24, 3: v34}
        us = []
        for kind, stage, _rate, conv, bn in self.branches:
            if kind == "pair":
                us.append(relu(batch_norm(conv2d(pair_inputs[stage], conv), bn, training)))
            elif kind == "solo":
                us.append(relu(batch_norm(conv2d(y4, conv), bn, training)))
            else:
                pooled = conv2d(global_avg_pool(y4), conv)
                us.append(bilinear_resize(pooled, h4, w4))
        fused = conv2d(concat_channels(us), self.proj)
        return relu(batch_norm(fused, self.proj_bn, training))

    def named_params(self, prefix: str = "pa"):
        out = []
        for k, (kind, _stage, _rate, conv, bn) in enumerate(self.branches, start=1):
            out.append((f"{prefix}.branch.{k}.conv", conv.weight))
            if conv.bias is not None:
                out.append((f"{prefix}.branch.{k}.conv.bias", conv.bias))
            if bn is not None:
                out.append((f"{prefix}.branch.{k}.bn.gamma", bn.gamma))
                out.append((f"{prefix}.branch.{k}.bn.beta", bn.beta))
        out.append((f"{prefix}.proj", self.proj.weight))
        out.append((f"{prefix}.proj.bias", self.proj.bias))
        out.append((f"{prefix}.proj.bn.gamma", self.proj_bn.gamma))
        out.append((f"{prefix}.proj.bn.beta", self.proj_bn.beta))
        return out

    def named_buffers(self, prefix: str = "pa"):
        out = []
        for k, (_kind, _stage, _rate, _conv, bn) in enumerate(self.branches, start=1):
            if bn is not None:
                out.append((f"{prefix}.branch.{k}.bn.running_mean", bn.running_mean))
                out.append((f"{prefix}.branch.{k}.bn.running_var", bn.running_var))
        out.append((f"{prefix}.proj.bn.running_mean", self.proj_bn.running_mean))
        out.append((f"{prefix}.proj.bn.running_var", self.proj_bn.running_var))
        return out


@dataclass(frozen=True)
class BranchCoverage:
    """One branch's receptive-field interval in input pixels.

    ``hi`` is None for the global-pooling branch, which covers the whole
    image and takes no part in span/overlap arithmetic.
    """

    label: str
    stage: int
    rate: int | None
    lo: int
    hi: int | None


@dataclass(frozen=True)
class ScaleCoverage:
    """Coverage summary of one wiring.

    union_span: extent from the smallest covered scale to the largest among
    the four conv branches.  overlap: total length of pairwise interval
    intersections (scale units covered redundantly, summed over pairs).
    """

    branches: tuple[BranchCoverage, ...]
    union_span: int
    overlap: int


def scale_coverage(cfg: PairedAsppConfig, metadata: StageMetadata) -> ScaleCoverage:
    """Receptive-field coverage of a wiring given backbone stage metadata."""
    rfs, jumps = metadata.rfs, metadata.jumps
    j4 = jumps[3]
    branches = []
    for kind, stage, rate in branch_specs(cfg.combination):
        anchor = rfs[stage - 1]
        if kind == "gap":
            branches.append(BranchCoverage("gap(Y4)", stage, None, anchor, None))
            continue
        label = f"pair(Y{stage},Y4)@rate{rate}" if kind == "pair" else f"solo(Y4)@rate{rate}"
        branches.append(BranchCoverage(label, stage, rate, anchor, anchor + 2 * rate * j4))
    finite = [b for b in branches if b.hi is not None]
    union_span = max(b.hi for b in finite) - min(b.lo for b in finite)
    overlap = 0
    for i in range(len(finite)):
        for j in range(i + 1, len(finite)):
            a, b = finite[i], finite[j]
            overlap += max(0, min(a.hi, b.hi) - max(a.lo, b.lo))
    return ScaleCoverage(branches=tuple(branches), union_span=union_span, overlap=overlap)
