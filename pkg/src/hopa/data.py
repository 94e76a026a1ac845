"""Synthetic segmentation datasets with statistically controlled textures.

Classes are told apart by the lowest moment of their per-pixel colour
distribution that differs:

    order 1: channel means differ (plain colours),
    order 2: means match, variances differ,
    order 3: means and variances match, third central moments differ.

The order-3 construction hides the class in a three-cell sign rule.  Every
texture cell gets one fair sign s shared by all channels (value mean +-
amp * s), independent across cells, except that in each anchored group of
five cells along a row the signs at offsets (0, 2, 4) multiply to the
class parity.  Because any one or two of the tied cells are still exactly
uniform (the remaining tied cell acts as a fresh coin), every single-pixel
distribution and every two-point correlation is identical for the +- pair;
the anchored three-cell product E[d(j) d(j+2) d(j+4)] = parity * amp^3 is
the lowest-order statistic that separates them, with a pair gap of
2 * amp^3 (about 0.086 for amp = 0.35).  The spacing matters: a window that
contains a full triple spans at least 10 pixels and mixes free cells, so no
short-window threshold reveals the class either.  Textures are
drawn per ``cell`` x ``cell`` block so local averaging inside a network does
not immediately wash the statistics out.  Additive uniform noise is
symmetric, bounded, and channel-independent, which leaves all the
controlled moments intact.

Storage: binary PPM (P6) images, binary PGM (P5) labels, an ``index.txt`` of
"image_path label_path" lines, and a small ``meta.cfg``.  Generation is
deterministic per seed, byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "SegSample",
    "SyntheticSpec",
    "GenerationError",
    "builtin_spec",
    "class_distributions",
    "render_sample",
    "gen_synthetic",
    "write_ppm",
    "read_ppm",
    "write_pgm",
    "read_pgm",
    "load_index",
    "load_dataset",
    "read_meta_classes",
    "IGNORE_LABEL",
]

IGNORE_LABEL = 255

# Sign-texture amplitude for mean/variance-matched pairs.
_PARITY_AMP = 0.35
_WIDE_SIGMA = 0.30
_NARROW_SIGMA = 0.15
_COLOR_SIGMA = 0.04

# Palette with >= 0.2 separation in every channel between any two entries.
_PALETTE = [
    (0.25, 0.30, 0.70),
    (0.72, 0.68, 0.28),
    (0.48, 0.08, 0.90),
    (0.92, 0.88, 0.08),
]

# Base colors for mean-matched pairs.  Channels stay in [0.37, 0.63] so the
# +-0.35 sign textures plus bounded noise never clip against [0, 1]; any two
# entries differ by 0.26 in at least two channels.
_MID_PALETTE = [
    (0.37, 0.37, 0.63),
    (0.37, 0.63, 0.37),
    (0.63, 0.37, 0.37),
    (0.63, 0.63, 0.63),
]

# Row-triple constraint layout for order-3 textures, in texture cells.  Each
# group of _TRIPLE_GROUP consecutive cells in a row (anchored at the image
# origin) ties the signs at the _TRIPLE_OFFSETS to a product of the class
# parity; all other cells are free fair coins.  Any one or two of the tied
# cells remain exactly uniform (the third acts as a fresh coin), so no
# statistic of fewer than three cells can tell the two parities apart.
_TRIPLE_OFFSETS = (0, 2, 4)
_TRIPLE_GROUP = 5


class GenerationError(ValueError):
    """A synthetic spec that cannot be realised."""


@dataclass
class SegSample:
    image: np.ndarray  # (3, h, w) float64 in [0, 1]
    label: np.ndarray  # (h, w) integer class ids, 255 = ignore


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    canvas: int = 64
    pairs: tuple = ()  # (class_a, class_b, order) triples
    shapes: tuple = ("rect", "disc", "bar")
    noise: float = 0.015
    cell: int = 2
    train_count: int = 128
    val_count: int = 32
    shapes_per_image: tuple[int, int] = (5, 9)


_BUILTIN = {
    # two classes split by colour alone; quick to learn
    "colors2": SyntheticSpec(num_classes=2, pairs=((0, 1, 1),), train_count=128, val_count=32),
    # three classes where foreground textures differ from background by variance
    "order2": SyntheticSpec(num_classes=3, pairs=((0, 1, 2), (0, 2, 1)), train_count=256, val_count=64),
    # two mean/variance-matched pairs split only by cross-channel third moments
    "order3": SyntheticSpec(num_classes=4, pairs=((0, 1, 3), (2, 3, 3)),
                            train_count=512, val_count=128),
}


def builtin_spec(name: str) -> SyntheticSpec:
    try:
        return _BUILTIN[name]
    except KeyError:
        raise GenerationError(f"unknown dataset preset {name!r}; choose from {sorted(_BUILTIN)}") from None


# ---------------------------------------------------------------------------
# class signature assignment


@dataclass(frozen=True)
class ClassDistribution:
    """Texture statistics for one class.

    Each texture cell draws one value per channel.  With parity == 0 the
    channels are independent two-point atoms (values[ch] with probs[ch]).
    With parity == +-1 one fair sign per cell drives all channels (value
    mean +- sigma), and the signs at the anchored row offsets (0, 2, 4) of
    each five-cell group multiply to parity; all marginal and two-point
    statistics are then identical for a +- pair, and only the anchored
    three-cell moment carries the sign.
    """

    means: tuple
    sigmas: tuple
    parity: int
    values: tuple   # per channel, (low/high atom values)
    probs: tuple    # per channel, matching probabilities

    def moments(self):
        """Exact (mean, variance, third central moment) per channel."""
        out = []
        for vals, ps in zip(self.values, self.probs):
            v, p = np.asarray(vals), np.asarray(ps)
            mean = float((v * p).sum())
            var = float(((v - mean) ** 2 * p).sum())
            m3 = float(((v - mean) ** 3 * p).sum())
            out.append((mean, var, m3))
        return out

    def triple_moment(self) -> float:
        """Exact anchored three-cell row moment E[d(j) d(j+2) d(j+4)], any
        channel, at group-aligned j."""
        if self.parity == 0:
            return 0.0
        return self.parity * self.sigmas[0] ** 3


def _atoms(mean: float, sigma: float):
    return (mean - sigma, mean + sigma), (0.5, 0.5)


def class_distributions(spec: SyntheticSpec) -> list[ClassDistribution]:
    """Resolve the pair constraints into concrete per-class distributions.

    Raises GenerationError when the constraints are contradictory or exceed
    the available palette pool.
    """
    k = spec.num_classes
    triple_partner, var_partner = {}, {}
    color_partners = {c: [] for c in range(k)}
    for a, b, order in spec.pairs:
        if not (0 <= a < k and 0 <= b < k):
            raise GenerationError(f"pair ({a}, {b}, {order}) references a class outside [0, {k})")
        if a == b:
            raise GenerationError(f"pair ({a}, {b}, {order}) pairs a class with itself")
        if order == 3:
            for c in (a, b):
                if c in triple_partner:
                    raise GenerationError(f"class {c} appears in more than one order-3 pair")
            triple_partner[a], triple_partner[b] = b, a
        elif order == 2:
            for c in (a, b):
                if c in var_partner:
                    raise GenerationError(f"class {c} appears in more than one order-2 pair")
            var_partner[a], var_partner[b] = b, a
        elif order == 1:
            color_partners[a].append(b)
            color_partners[b].append(a)
        else:
            raise GenerationError(f"pair ({a}, {b}, {order}) has separation order outside 1..3")
    for c in set(triple_partner) & set(var_partner):
        raise GenerationError(
            f"class {c} appears in both an order-2 and an order-3 pair; "
            "one class cannot be mean/variance-matched to two different partners"
        )

    # Matched-moment pairs share the next base color; the pair members then
    # differ only in the statistic their order demands.
    means, sigmas, parity = {}, {}, {}
    mid = iter(_MID_PALETTE)
    for a, b, order in spec.pairs:
        if order == 1 or a in means:
            continue
        try:
            base = next(mid)
        except StopIteration:
            raise GenerationError(
                f"pair ({a}, {b}, {order}) needs a mean-matched base color but the "
                f"pool ({len(_MID_PALETTE)}) is exhausted"
            ) from None
        means[a] = means[b] = base
        if order == 3:
            sigmas[a] = sigmas[b] = (_PARITY_AMP,) * 3
            parity[a], parity[b] = 1, -1
        else:
            sigmas[a], sigmas[b] = (_WIDE_SIGMA,) * 3, (_NARROW_SIGMA,) * 3
            parity[a] = parity[b] = 0

    def separated(u, v):
        return all(abs(x - y) >= 0.2 for x, y in zip(u, v))

    used = set()
    for c in range(k):
        if c in means:
            continue
        taken = [means[p] for p in color_partners[c] if p in means]
        mean = next(
            (col for col in _PALETTE
             if col not in used and all(separated(col, t) for t in taken)),
            None,
        )
        if mean is None:
            raise GenerationError(
                f"class {c} needs a color >= 0.2 per channel away from its order-1 "
                f"partners but the palette ({len(_PALETTE)}) is exhausted"
            )
        used.add(mean)
        means[c] = mean
        sigmas[c] = (_COLOR_SIGMA,) * 3
        parity[c] = 0
    for c in range(k):
        bad = [p for p in color_partners[c] if not separated(means[c], means[p])]
        if bad:
            raise GenerationError(
                f"order-1 pair ({c}, {bad[0]}) cannot separate: both classes have "
                "their mean colors pinned by other constraints"
            )

    out = []
    for c in range(k):
        values, probs = zip(*(_atoms(means[c][ch], sigmas[c][ch]) for ch in range(3)))
        out.append(
            ClassDistribution(
                means=means[c], sigmas=sigmas[c], parity=parity[c],
                values=values, probs=probs,
            )
        )
    return out


# ---------------------------------------------------------------------------
# rendering


def _paint_shape(label: np.ndarray, kind: str, cls: int, rng: np.random.Generator):
    h, w = label.shape
    if kind == "rect":
        rh = int(rng.integers(10, min(29, h)))
        rw = int(rng.integers(10, min(29, w)))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        label[y0 : y0 + rh, x0 : x0 + rw] = cls
    elif kind == "disc":
        r = int(rng.integers(6, min(15, h // 2)))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        yy, xx = np.ogrid[:h, :w]
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    elif kind == "bar":
        t = int(rng.integers(3, 6))
        length = int(rng.integers(20, min(45, w)))
        if rng.integers(2):  # horizontal
            y0 = int(rng.integers(0, h - t + 1))
            x0 = int(rng.integers(0, w - length + 1))
            label[y0 : y0 + t, x0 : x0 + length] = cls
        else:
            y0 = int(rng.integers(0, h - length + 1))
            x0 = int(rng.integers(0, w - t + 1))
            label[y0 : y0 + length, x0 : x0 + t] = cls
    else:
        raise GenerationError(f"unknown shape kind {kind!r}")


def _texture_field(dist: ClassDistribution, h: int, w: int, cell: int, rng: np.random.Generator):
    gh, gw = -(-h // cell), -(-w // cell)
    field = np.empty((3, gh, gw))
    if dist.parity != 0:
        # one fair sign per cell, shared across channels; the last tied cell
        # of every complete group enforces the parity product
        signs = np.where(rng.random((gh, gw)) < 0.5, -1.0, 1.0)
        o0, o1, o2 = _TRIPLE_OFFSETS
        for j in range(0, gw - o2, _TRIPLE_GROUP):
            signs[:, j + o2] = dist.parity * signs[:, j + o0] * signs[:, j + o1]
        for ch in range(3):
            field[ch] = dist.means[ch] + dist.sigmas[ch] * signs
    else:
        for ch in range(3):
            vals = np.asarray(dist.values[ch])
            field[ch] = vals[(rng.random((gh, gw)) < dist.probs[ch][1]).astype(np.int64)]
    if cell > 1:
        field = np.repeat(np.repeat(field, cell, axis=1), cell, axis=2)
    return field[:, :h, :w]


def render_sample(spec: SyntheticSpec, dists, rng: np.random.Generator) -> SegSample:
    """One image/label pair: class-0 background plus random textured shapes."""
    h = w = spec.canvas
    label = np.zeros((h, w), dtype=np.int64)
    lo, hi = spec.shapes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(1, spec.num_classes)) if spec.num_classes > 1 else 0
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        _paint_shape(label, kind, cls, rng)
    image = np.zeros((3, h, w))
    for cls in range(spec.num_classes):
        field = _texture_field(dists[cls], h, w, spec.cell, rng)
        mask = label == cls
        image[:, mask] = field[:, mask]
    if spec.noise:
        image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape)
    return SegSample(image=np.clip(image, 0.0, 1.0), label=label)


# ---------------------------------------------------------------------------
# PPM / PGM files


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """Binary P6 file from a (3, h, w) float image in [0, 1]."""
    arr = _to_uint8(image)
    _c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(path, label: np.ndarray):
    """Binary P5 file from an (h, w) integer label map (values 0..255)."""
    arr = np.asarray(label)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError(f"label values outside 0..255 cannot be stored: min={arr.min()} max={arr.max()}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def _parse_pnm(blob: bytes, path, magic: bytes):
    if blob[:2] != magic:
        raise ValueError(f"{path}: byte 0: expected magic {magic.decode()}, got {blob[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                nl = blob.find(b"\n", pos)
                pos = len(blob) if nl == -1 else nl + 1
            else:
                break
        start = pos
        while pos < len(blob) and blob[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ValueError(f"{path}: byte {start}: expected an integer header field")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise ValueError(f"{path}: byte {pos}: expected single whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: byte {pos}: maxval must be 255, got {maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """(3, h, w) float64 image in [0, 1] from a binary P6 file."""
    blob = Path(path).read_bytes()
    w, h, pos = _parse_pnm(blob, path, b"P6")
    expected = w * h * 3
    if len(blob) - pos != expected:
        raise ValueError(f"{path}: byte {pos}: expected {expected} payload bytes, found {len(blob) - pos}")
    arr = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """(h, w) int64 label map from a binary P5 file."""
    blob = Path(path).read_bytes()
    w, h, pos = _parse_pnm(blob, path, b"P5")
    expected = w * h
    if len(blob) - pos != expected:
        raise ValueError(f"{path}: byte {pos}: expected {expected} payload bytes, found {len(blob) - pos}")
    return np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w).astype(np.int64)


# ---------------------------------------------------------------------------
# dataset directories


def gen_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> tuple[Path, Path]:
    """Write train/ and val/ splits; deterministic byte-for-byte per seed."""
    dists = class_distributions(spec)
    out_dir = Path(out_dir)
    split_dirs = []
    for split_id, (split, count) in enumerate(
        [("train", spec.train_count), ("val", spec.val_count)]
    ):
        root = out_dir / split
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_id, i]))
            sample = render_sample(spec, dists, rng)
            img_rel = f"images/{i:05d}.ppm"
            lab_rel = f"labels/{i:05d}.pgm"
            write_ppm(root / img_rel, sample.image)
            write_pgm(root / lab_rel, sample.label)
            lines.append(f"{img_rel} {lab_rel}")
        (root / "index.txt").write_text("\n".join(lines) + "\n")
        (root / "meta.cfg").write_text(
            f"classes = {spec.num_classes}\ncanvas = {spec.canvas}\n"
        )
        split_dirs.append(root)
    return tuple(split_dirs)


def load_index(index_path) -> list[tuple[Path, Path]]:
    """Parse "image_path label_path" lines relative to the index location."""
    index_path = Path(index_path)
    root = index_path.parent
    out = []
    for lineno, line in enumerate(index_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{index_path}: line {lineno}: expected 'image label', got {line!r}")
        out.append((root / parts[0], root / parts[1]))
    return out


def read_meta_classes(split_dir) -> int | None:
    """Class count recorded in a split's meta.cfg, if present."""
    meta = Path(split_dir) / "meta.cfg"
    if not meta.exists():
        return None
    for line in meta.read_text().splitlines():
        if line.split("=")[0].strip() == "classes":
            return int(line.split("=")[1].strip())
    return None


def load_dataset(split_dir, num_classes: int | None = None) -> list[SegSample]:
    """Load every sample listed in split_dir/index.txt.

    Labels are validated against the class count (from the argument or the
    split's meta.cfg): any value >= num_classes other than 255 is an error.
    """
    split_dir = Path(split_dir)
    if num_classes is None:
        num_classes = read_meta_classes(split_dir)
    samples = []
    for img_path, lab_path in load_index(split_dir / "index.txt"):
        for p in (img_path, lab_path):
            if not p.exists():
                raise FileNotFoundError(f"index entry refers to missing file: {p}")
        image = read_ppm(img_path)
        label = read_pgm(lab_path)
        if image.shape[1:] != label.shape:
            raise ValueError(
                f"{img_path} has spatial dims {image.shape[1:]} but {lab_path} has {label.shape}"
            )
        if num_classes is not None:
            bad = (label >= num_classes) & (label != IGNORE_LABEL)
            if bad.any():
                raise ValueError(
                    f"{lab_path}: label value {int(label[bad][0])} outside [0, {num_classes}) "
                    f"and not ignore ({IGNORE_LABEL})"
                )
        samples.append(SegSample(image=image, label=label))
    return samples


def with_counts(spec: SyntheticSpec, train_count: int, val_count: int) -> SyntheticSpec:
    return replace(spec, train_count=train_count, val_count=val_count)
