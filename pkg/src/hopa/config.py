"""Plain-text run configuration.

Format: one ``key = value`` per line, ``#`` starts a comment, blank lines are
skipped.  Keys are dotted (``optimizer.base_lr``) and drawn from a fixed
schema; anything outside it is rejected by name so typos fail loudly instead
of silently training with defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .backbone import backbone_config
from .data import SyntheticSpec, builtin_spec
from .model import ModelConfig
from .pipeline import InferConfig, TrainConfig

__all__ = [
    "ConfigError",
    "SCHEMA",
    "DATASET_SCHEMA",
    "parse_config_text",
    "load_config_file",
    "apply_overrides",
    "model_config_from",
    "train_config_from",
    "infer_config_from",
    "dataset_spec_from",
    "load_dataset_spec",
]


class ConfigError(ValueError):
    """Malformed, unknown, or untypable configuration input."""


def _int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _bool(key, raw):
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def _floats(key, raw):
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"{key}: expected one or more numbers, got {raw!r}")
    return tuple(_float(key, p) for p in parts)


def _str(_key, raw):
    return raw.strip()


def _warmup(key, raw):
    if raw.strip().lower() == "auto":
        return None
    return _int(key, raw)


# key -> converter; values feed ModelConfig / TrainConfig / InferConfig below
SCHEMA = {
    "seed": _int,
    "model.num_classes": _int,
    "model.backbone": _str,
    "model.order": _int,
    "model.rank": _int,
    "model.degree_width": _int,
    "model.branch_width": _int,
    "model.fuse_width": _int,
    "model.combination": _int,
    "paired_aspp.combination": _int,
    "optimizer.base_lr": _float,
    "optimizer.momentum": _float,
    "optimizer.weight_decay": _float,
    "optimizer.batch_size": _int,
    "optimizer.max_iter": _int,
    "optimizer.warmup_iter": _warmup,
    "optimizer.poly_power": _float,
    "augment.scale_min": _float,
    "augment.scale_max": _float,
    "augment.flip": _bool,
    "augment.brightness": _float,
    "augment.crop": _int,
    "infer.scales": _floats,
    "infer.flip": _bool,
}


def typed_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    return SCHEMA[key](key, raw)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> string mapping; rejects syntax errors and duplicate keys."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}: line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        out[key] = raw
    return out


def load_config_file(path) -> dict:
    """Typed values from a config file; every key is schema-checked."""
    path = Path(path)
    raw = parse_config_text(path.read_text(), source=str(path))
    return {key: typed_value(key, value) for key, value in raw.items()}


def apply_overrides(values: dict, pairs) -> dict:
    """Fold command-line ``key=value`` strings over file-loaded values."""
    out = dict(values)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = (part.strip() for part in pair.split("=", 1))
        out[key] = typed_value(key, raw)
    return out


def model_config_from(values: dict, num_classes: int | None = None) -> ModelConfig:
    """Build the model description; dataset class count fills the gap when
    model.num_classes is not set explicitly."""
    k = values.get("model.num_classes", num_classes)
    if k is None:
        raise ConfigError("model.num_classes is required (no dataset metadata to infer it from)")
    kwargs = {"num_classes": k}
    if "model.backbone" in values:
        try:
            kwargs["backbone"] = backbone_config(values["model.backbone"])
        except ValueError as exc:
            raise ConfigError(f"model.backbone: {exc}") from None
    for field in ("order", "rank", "degree_width", "branch_width", "fuse_width", "combination"):
        key = f"model.{field}"
        if key in values:
            kwargs[field] = values[key]
    if "paired_aspp.combination" in values:
        kwargs["combination"] = values["paired_aspp.combination"]
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


_TRAIN_KEYS = {
    "optimizer.base_lr": "base_lr",
    "optimizer.momentum": "momentum",
    "optimizer.weight_decay": "weight_decay",
    "optimizer.batch_size": "batch_size",
    "optimizer.max_iter": "max_iter",
    "optimizer.warmup_iter": "warmup_iter",
    "optimizer.poly_power": "poly_power",
    "augment.flip": "flip",
    "augment.brightness": "brightness_jitter",
    "seed": "seed",
}


def train_config_from(values: dict) -> TrainConfig:
    kwargs = {field: values[key] for key, field in _TRAIN_KEYS.items() if key in values}
    base = TrainConfig()
    lo = values.get("augment.scale_min", base.scale_range[0])
    hi = values.get("augment.scale_max", base.scale_range[1])
    if lo > hi:
        raise ConfigError(f"augment.scale_min ({lo}) exceeds augment.scale_max ({hi})")
    kwargs["scale_range"] = (lo, hi)
    if "augment.crop" in values:
        side = values["augment.crop"]
        if side <= 0:
            raise ConfigError(f"augment.crop must be positive, got {side}")
        kwargs["crop"] = (side, side)
    return dataclasses.replace(base, **kwargs)


def infer_config_from(values: dict) -> InferConfig:
    kwargs = {}
    if "infer.scales" in values:
        scales = values["infer.scales"]
        if any(s <= 0 for s in scales):
            raise ConfigError(f"infer.scales must be positive, got {scales}")
        kwargs["scales"] = scales
    if "infer.flip" in values:
        kwargs["flip"] = values["infer.flip"]
    return InferConfig(**kwargs)


# ---------------------------------------------------------------------------
# dataset spec files (used by the gen subcommand)


def _pairs(key, raw):
    triples = []
    for token in raw.replace(",", " ").split():
        bits = token.split(":")
        if len(bits) != 3:
            raise ConfigError(f"{key}: expected class:class:order triples, got {token!r}")
        triples.append(tuple(_int(key, b) for b in bits))
    if not triples:
        raise ConfigError(f"{key}: expected at least one triple, got {raw!r}")
    return tuple(triples)


def _words(key, raw):
    parts = tuple(p for p in raw.replace(",", " ").split())
    if not parts:
        raise ConfigError(f"{key}: expected one or more names, got {raw!r}")
    return parts


DATASET_SCHEMA = {
    "preset": _str,
    "classes": _int,
    "canvas": _int,
    "noise": _float,
    "cell": _int,
    "train_count": _int,
    "val_count": _int,
    "pairs": _pairs,
    "shapes": _words,
    "shapes_min": _int,
    "shapes_max": _int,
}


def dataset_spec_from(values: dict) -> SyntheticSpec:
    """Resolve dataset-spec keys, optionally starting from a named preset."""
    if "preset" in values:
        try:
            base = builtin_spec(values["preset"])
        except ValueError as exc:
            raise ConfigError(f"preset: {exc}") from None
    elif "classes" in values:
        base = SyntheticSpec(num_classes=values["classes"])
    else:
        raise ConfigError("dataset spec needs either 'preset' or 'classes'")
    kwargs = {}
    simple = {"classes": "num_classes", "canvas": "canvas", "noise": "noise", "cell": "cell",
              "train_count": "train_count", "val_count": "val_count",
              "pairs": "pairs", "shapes": "shapes"}
    for key, fld in simple.items():
        if key in values:
            kwargs[fld] = values[key]
    lo = values.get("shapes_min", base.shapes_per_image[0])
    hi = values.get("shapes_max", base.shapes_per_image[1])
    if lo > hi or lo < 0:
        raise ConfigError(f"shapes_min..shapes_max must be a valid range, got {lo}..{hi}")
    kwargs["shapes_per_image"] = (lo, hi)
    return dataclasses.replace(base, **kwargs)


def load_dataset_spec(path) -> SyntheticSpec:
    path = Path(path)
    raw = parse_config_text(path.read_text(), source=str(path))
    values = {}
    for key, value in raw.items():
        if key not in DATASET_SCHEMA:
            raise ConfigError(f"unknown dataset spec key {key!r}")
        values[key] = DATASET_SCHEMA[key](key, value)
    return dataset_spec_from(values)
