"""Slim dilated residual backbone emitting four feature stages.

Layout: a stride-2 3x3 stem conv (BN, ReLU) and a stride-1 3x3 max pool,
then four residual stages.  Stages 2 and 3 downsample by 2; stages 3 and 4
use dilated 3x3 convs (rates 2 and 4) so the last two stages share one grid.
The resulting output strides of the four stage outputs are (2, 4, 8, 8):
an (n, 3, 64, 64) input yields spatial dims 32, 16, 8, 8.

Each stage doubles width up to 8x the base.  Blocks are basic two-conv
residual units; the closing BN of every block starts with gamma = 0, which
makes a fresh identity-skip block an exact no-op on non-negative inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormParams,
    Tensor,
    add,
    batch_norm,
    bn_params,
    conv2d,
    conv_output_size,
    conv_params,
    max_pool,
    relu,
    same_padding,
)

__all__ = [
    "BackboneConfig",
    "backbone_config",
    "Backbone",
    "StageMetadata",
    "stage_metadata",
    "stage_shapes",
    "fold_receptive_field",
    "STAGE_STRIDES",
    "STAGE_DILATIONS",
    "WIDTH_MULTIPLIERS",
]

# Structural constants: per-stage first-block stride, conv dilation, width factor.
STAGE_STRIDES = (1, 2, 2, 1)
STAGE_DILATIONS = (1, 1, 2, 4)
WIDTH_MULTIPLIERS = (1, 2, 4, 8)
STEM_STRIDE = 2


@dataclass(frozen=True)
class BackboneConfig:
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 1, 1)
    base_width: int = 8

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return tuple(self.base_width * m for m in WIDTH_MULTIPLIERS)


_PRESETS = {
    "toy": BackboneConfig(blocks_per_stage=(1, 1, 1, 1), base_width=8),
    "deep": BackboneConfig(blocks_per_stage=(3, 4, 23, 3), base_width=64),
}


_PRESET_ALIASES = {"paper": "deep"}


def backbone_config(preset: str) -> BackboneConfig:
    try:
        return _PRESETS[_PRESET_ALIASES.get(preset, preset)]
    except KeyError:
        raise ValueError(f"unknown backbone preset {preset!r}; choose from {sorted(_PRESETS)}") from None


@dataclass(frozen=True)
class StageMetadata:
    """Per-stage sampling jump, receptive field, and channel count."""

    jumps: tuple[int, int, int, int]
    rfs: tuple[int, int, int, int]
    channels: tuple[int, int, int, int]


def fold_receptive_field(layers, jump: int = 1, rf: int = 1) -> tuple[int, int]:
    """Fold (kernel, stride, dilation) layers through the standard recurrence.

    rf_out = rf_in + (k - 1) * dilation * jump_in;  jump_out = jump_in * stride.
    """
    for kernel, stride, dilation in layers:
        rf = rf + (kernel - 1) * dilation * jump
        jump = jump * stride
    return jump, rf


def _stage_layers(cfg: BackboneConfig, stage: int):
    """Main-path (kernel, stride, dilation) sequence of one stage.

    1x1 skip convs never widen the receptive field, so the main path is the
    one that matters for the recurrence.
    """
    d = STAGE_DILATIONS[stage]
    layers = []
    for b in range(cfg.blocks_per_stage[stage]):
        s = STAGE_STRIDES[stage] if b == 0 else 1
        layers.append((3, s, d))
        layers.append((3, 1, d))
    return layers


def stage_metadata(cfg: BackboneConfig) -> StageMetadata:
    """Jump/receptive-field/channel metadata for the four stage outputs."""
    jump, rf = fold_receptive_field([(3, STEM_STRIDE, 1), (3, 1, 1)])  # stem conv + pool
    jumps, rfs = [], []
    for stage in range(4):
        jump, rf = fold_receptive_field(_stage_layers(cfg, stage), jump, rf)
        jumps.append(jump)
        rfs.append(rf)
    return StageMetadata(jumps=tuple(jumps), rfs=tuple(rfs), channels=cfg.widths)


def stage_shapes(cfg: BackboneConfig, h: int, w: int) -> list[tuple[int, int]]:
    """Spatial dims of the four stage outputs via pure shape algebra."""
    for kernel, stride, dilation in [(3, STEM_STRIDE, 1), (3, 1, 1)]:
        pad = same_padding(kernel, dilation)
        h = conv_output_size(h, kernel, stride, dilation, pad)
        w = conv_output_size(w, kernel, stride, dilation, pad)
    out = []
    for stage in range(4):
        for kernel, stride, dilation in _stage_layers(cfg, stage):
            pad = same_padding(kernel, dilation)
            h = conv_output_size(h, kernel, stride, dilation, pad)
            w = conv_output_size(w, kernel, stride, dilation, pad)
        out.append((h, w))
    return out


class _Block:
    """conv3-BN-ReLU-conv3-BN residual unit with optional projection skip."""

    def __init__(self, c_in, c_out, stride, dilation, rng):
        self.conv1 = conv_params(c_in, c_out, 3, rng, stride=stride, dilation=dilation, bias=False)
        self.bn1 = bn_params(c_out)
        self.conv2 = conv_params(c_out, c_out, 3, rng, dilation=dilation, bias=False)
        self.bn2 = bn_params(c_out, gamma_init=0.0)
        if stride != 1 or c_in != c_out:
            self.skip_conv = conv_params(c_in, c_out, 1, rng, stride=stride, bias=False)
            self.skip_bn = bn_params(c_out)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x, training):
        y = relu(batch_norm(conv2d(x, self.conv1), self.bn1, training))
        y = batch_norm(conv2d(y, self.conv2), self.bn2, training)
        if self.skip_conv is not None:
            x = batch_norm(conv2d(x, self.skip_conv), self.skip_bn, training)
        return relu(add(x, y))

    def named_params(self, prefix):
        out = [
            (f"{prefix}.conv1.weight", self.conv1.weight),
            (f"{prefix}.bn1.gamma", self.bn1.gamma),
            (f"{prefix}.bn1.beta", self.bn1.beta),
            (f"{prefix}.conv2.weight", self.conv2.weight),
            (f"{prefix}.bn2.gamma", self.bn2.gamma),
            (f"{prefix}.bn2.beta", self.bn2.beta),
        ]
        if self.skip_conv is not None:
            out += [
                (f"{prefix}.skip.conv.weight", self.skip_conv.weight),
                (f"{prefix}.skip.bn.gamma", self.skip_bn.gamma),
                (f"{prefix}.skip.bn.beta", self.skip_bn.beta),
            ]
        return out

    def named_buffers(self, prefix):
        out = [
            (f"{prefix}.bn1.running_mean", self.bn1.running_mean),
            (f"{prefix}.bn1.running_var", self.bn1.running_var),
            (f"{prefix}.bn2.running_mean", self.bn2.running_mean),
            (f"{prefix}.bn2.running_var", self.bn2.running_var),
        ]
        if self.skip_bn is not None:
            out += [
                (f"{prefix}.skip.bn.running_mean", self.skip_bn.running_mean),
                (f"{prefix}.skip.bn.running_var", self.skip_bn.running_var),
            ]
        return out


class Backbone:
    """Four-stage residual feature extractor; see module docstring."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = cfg.widths
        self.stem_conv = conv_params(3, widths[0], 3, rng, stride=STEM_STRIDE, bias=False)
        self.stem_bn = bn_params(widths[0])
        self.stages = []
        c_in = widths[0]
        for stage in range(4):
            blocks = []
            for b in range(cfg.blocks_per_stage[stage]):
                stride = STAGE_STRIDES[stage] if b == 0 else 1
                blocks.append(_Block(c_in, widths[stage], stride, STAGE_DILATIONS[stage], rng))
                c_in = widths[stage]
            self.stages.append(blocks)

    def forward(self, x: Tensor, training: bool = False):
        n, c, h, w = x.data.shape if x.data.ndim == 4 else (None,) * 4
        if c != 3:
            raise ValueError(f"backbone expects (n, 3, h, w) input, got shape {x.data.shape}")
        if h % 8 or w % 8:
            raise ValueError(f"backbone input dims must be divisible by 8, got shape {x.data.shape}")
        y = relu(batch_norm(conv2d(x, self.stem_conv), self.stem_bn, training))
        y = max_pool(y, kernel=3, stride=1, padding=1)
        outs = []
        for blocks in self.stages:
            for block in blocks:
                y = block.forward(y, training)
            outs.append(y)
        return tuple(outs)

    def metadata(self) -> StageMetadata:
        return stage_metadata(self.cfg)

    def named_params(self, prefix: str = "backbone"):
        out = [
            (f"{prefix}.stem.conv.weight", self.stem_conv.weight),
            (f"{prefix}.stem.bn.gamma", self.stem_bn.gamma),
            (f"{prefix}.stem.bn.beta", self.stem_bn.beta),
        ]
        for i, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks, start=1):
                out += block.named_params(f"{prefix}.stage{i}.block{b}")
        return out

    def named_buffers(self, prefix: str = "backbone"):
        out = [
            (f"{prefix}.stem.bn.running_mean", self.stem_bn.running_mean),
            (f"{prefix}.stem.bn.running_var", self.stem_bn.running_var),
        ]
        for i, blocks in enumerate(self.stages, start=1):
            for b, block in enumerate(blocks, start=1):
                out += block.named_buffers(f"{prefix}.stage{i}.block{b}")
        return out
