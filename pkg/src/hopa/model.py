"""Full segmentation network: backbone -> per-stage high-order heads -> fusion.

Each backbone stage output passes through its own high-order module before the
paired pyramid fuses all four.  A 1x1 classifier maps the fused features to
class logits, which are bilinearly upsampled to the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, backbone_config, stage_metadata
from .highorder import hr_forward, hr_named_params, hr_params
from .paired_aspp import PairedAspp, PairedAsppConfig
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor, bilinear_resize, conv2d, conv_params

__all__ = ["ModelConfig", "SegModel", "model_forward", "load_model"]


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters of the whole network."""

    num_classes: int
    backbone: BackboneConfig = field(default_factory=lambda: backbone_config("toy"))
    order: int = 3
    rank: int = 8          # projections per degree inside each high-order module
    degree_width: int = 8  # channels each degree contributes after mixing
    branch_width: int = 16
    fuse_width: int = 32
    combination: int = 1

    def aspp_config(self) -> PairedAsppConfig:
        c = self.order * self.degree_width
        return PairedAsppConfig(
            in_channels=(c, c, c, c),
            branch_width=self.branch_width,
            fuse_width=self.fuse_width,
            combination=self.combination,
        )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "blocks_per_stage": list(self.backbone.blocks_per_stage),
            "base_width": self.backbone.base_width,
            "order": self.order,
            "rank": self.rank,
            "degree_width": self.degree_width,
            "branch_width": self.branch_width,
            "fuse_width": self.fuse_width,
            "combination": self.combination,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_classes=d["num_classes"],
            backbone=BackboneConfig(
                blocks_per_stage=tuple(d["blocks_per_stage"]), base_width=d["base_width"]
            ),
            order=d["order"],
            rank=d["rank"],
            degree_width=d["degree_width"],
            branch_width=d["branch_width"],
            fuse_width=d["fuse_width"],
            combination=d["combination"],
        )


class SegModel:
    """Parameter container plus forward pass."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone, rng)
        widths = cfg.backbone.widths
        self.hr = [
            hr_params(widths[i], rng, order=cfg.order, rank=cfg.rank, out_width=cfg.degree_width)
            for i in range(4)
        ]
        self.aspp = PairedAspp(cfg.aspp_config(), rng)
        self.head = conv_params(cfg.fuse_width, cfg.num_classes, 1, rng, bias=True)

    def forward(self, img: Tensor, training: bool = False) -> Tensor:
        """Class logits at the input's spatial resolution."""
        _, _, h, w = img.data.shape
        stages = self.backbone.forward(img, training)
        ys = [hr_forward(x, p) for x, p in zip(stages, self.hr)]
        fused = self.aspp.forward(ys, training)
        logits = conv2d(fused, self.head)
        return bilinear_resize(logits, h, w)

    def metadata(self):
        return stage_metadata(self.cfg.backbone)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self):
        out = list(self.backbone.named_params("backbone"))
        for i, p in enumerate(self.hr, start=1):
            out += hr_named_params(f"hr{i}", p)
        out += self.aspp.named_params("pa")
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def named_buffers(self):
        return list(self.backbone.named_buffers("backbone")) + list(self.aspp.named_buffers("pa"))

    def parameters(self):
        return [t for _name, t in self.named_params()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    # -- checkpointing ---------------------------------------------------------

    def state_arrays(self):
        """All persistent arrays (trainable params then buffers) by name."""
        out = [(name, t.data) for name, t in self.named_params()]
        out += [(name, buf) for name, buf in self.named_buffers()]
        return out

    def save(self, directory, iteration: int = 0, rng_state: dict | None = None):
        save_checkpoint(
            directory, self.state_arrays(), iteration, rng_state or {},
            extra={"model": self.cfg.to_dict()},
        )

    def load(self, directory):
        arrays, iteration, rng_state, _extra = load_checkpoint(directory)
        named = dict(self.named_params())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(named) + list(buffers) if n not in arrays]
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing[:5]}")
        for name, tensor in named.items():
            src = arrays[name]
            if src.shape != tensor.data.shape:
                raise ValueError(
                    f"checkpoint tensor {name} has shape {src.shape}, model expects {tensor.data.shape}"
                )
            tensor.data[...] = src
        for name, buf in buffers.items():
            buf[...] = arrays[name]
        return iteration, rng_state


def load_model(directory) -> SegModel:
    """Rebuild a model from a checkpoint directory written by SegModel.save."""
    _arrays, _iteration, _rng_state, extra = load_checkpoint(directory)
    if "model" not in extra:
        raise ValueError(f"{directory}: manifest carries no model hyper-parameters")
    cfg = ModelConfig.from_dict(extra["model"])
    model = SegModel(cfg, np.random.default_rng(0))
    model.load(directory)
    return model


def model_forward(img: Tensor, model: SegModel, training: bool = False) -> Tensor:
    return model.forward(img, training)
