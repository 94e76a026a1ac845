"""Training and inference: loss, schedule, optimizer, augmentation, eval.

Determinism contract: everything random is derived from one seed.  Model init
and batch ordering use spawned child streams; each augmentation draws from a
stream seeded by (seed, epoch, sample index), so results do not depend on how
samples are batched or ordered within an epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import ConfusionMatrix, miou
from .model import ModelConfig, SegModel
from .tensor import Tensor, backward, no_grad, resize_matrix

__all__ = [
    "DegenerateBatchError",
    "TrainConfig",
    "InferConfig",
    "cross_entropy_loss",
    "poly_lr",
    "sgd_step",
    "SGD",
    "augment",
    "flip_horizontal",
    "resize_image",
    "resize_labels_nearest",
    "softmax_probs",
    "infer_multiscale",
    "predict",
    "evaluate",
    "iou_table",
    "train_model",
    "TrainResult",
]


class DegenerateBatchError(ValueError):
    """Raised when a loss batch contains no non-ignored pixels."""


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    crop: tuple[int, int] = (64, 64)
    max_iter: int = 600
    warmup_iter: int | None = None  # defaults to 5% of max_iter
    poly_power: float = 0.9
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip: bool = True
    brightness_jitter: float = 0.2
    ignore_label: int = 255
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.warmup_iter is not None and not 0 <= self.warmup_iter < self.max_iter:
            raise ValueError(
                f"warmup_iter {self.warmup_iter} must lie in [0, max_iter={self.max_iter})"
            )

    @property
    def warmup(self) -> int:
        if self.warmup_iter is not None:
            return self.warmup_iter
        return max(1, round(0.05 * self.max_iter))


@dataclass
class InferConfig:
    scales: tuple[float, ...] = (1.0,)
    flip: bool = False

    def __post_init__(self):
        if len(self.scales) == 0 or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be nonempty and positive, got {self.scales!r}")


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean pixel cross-entropy over non-ignored pixels, as a scalar tensor.

    logits: (n, K, h, w); labels: (n, h, w) integers in [0, K) or ignore_label.
    """
    n, k, h, w = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits shape {logits.data.shape}")
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateBatchError("cross_entropy_loss: every pixel in the batch is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(
            f"label value {int(labels[bad][0])} outside [0, {k}) and not ignore ({ignore_label})"
        )

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    safe_labels = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_probs, safe_labels[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n_valid

    softmax = exp / denom

    def bwd(gy):
        g = softmax.copy()
        ni, hi, wi = np.nonzero(valid)
        g[ni, labels[ni, hi, wi], hi, wi] -= 1.0
        g *= (valid[:, None] / n_valid) * gy.reshape(())
        return (g,)

    out = Tensor(np.array(loss).reshape(1, 1, 1, 1))
    if logits.requires_grad or logits._parents:
        out.requires_grad = True
        out._parents = (logits,)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# schedule and optimizer


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """Linear warm-up from base/100 to base, then polynomial decay to zero.

    For iteration t past warm-up W: base * (1 - (t - W)/(max_iter - W)) ** power.
    """
    if iteration < 0 or iteration > cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    base = cfg.base_lr
    w = cfg.warmup
    if iteration < w:
        start = base / 100.0
        return start + (base - start) * (iteration / w)
    frac = (iteration - w) / (cfg.max_iter - w)
    return base * (1.0 - frac) ** cfg.poly_power


def sgd_step(params, grads, buffers, lr, momentum, weight_decay=0.0, decay=None):
    """In-place heavy-ball update on parallel lists of arrays.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
    ``decay`` optionally masks which entries receive weight decay.
    """
    for i, (p, g, v) in enumerate(zip(params, grads, buffers)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(
                f"sgd_step shape mismatch at entry {i}: param {p.shape}, "
                f"grad {g.shape}, buffer {v.shape}"
            )
        wd = weight_decay if (decay is None or decay[i]) else 0.0
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v


class SGD:
    """Momentum SGD over named tensors; weight decay hits conv weights only.

    Rank-4 tensors are convolution kernels; biases and batch-norm scales are
    rank-1 and stay undecayed.
    """

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.entries = [
            (name, t, np.zeros_like(t.data), t.data.ndim == 4) for name, t in named_params
        ]

    def step(self, lr: float):
        params = [t.data for _n, t, _v, _d in self.entries]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for _n, t, _v, _d in self.entries]
        buffers = [v for _n, _t, v, _d in self.entries]
        decay = [d for _n, _t, _v, d in self.entries]
        sgd_step(params, grads, buffers, lr, self.momentum, self.weight_decay, decay)

    def zero_grad(self):
        for _n, t, _v, _d in self.entries:
            t.zero_grad()


# ---------------------------------------------------------------------------
# augmentation


def flip_horizontal(arr: np.ndarray) -> np.ndarray:
    """Mirror the last (width) axis; an involution."""
    return np.ascontiguousarray(arr[..., ::-1])


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) float image."""
    ah = resize_matrix(img.shape[1], out_h)
    aw = resize_matrix(img.shape[2], out_w)
    return np.einsum("ij,cjk,lk->cil", ah, img, aw, optimize=True)


def resize_labels_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an (h, w) label map; values are preserved."""
    h, w = labels.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h), 0, h - 1).astype(np.int64)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w), 0, w - 1).astype(np.int64)
    return labels[np.ix_(ri, ci)]


def augment(image: np.ndarray, label: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Random scale, horizontal flip, brightness, then crop/pad to cfg.crop.

    Images are bilinearly resampled and zero-padded; labels use nearest
    neighbour and ignore-label padding, so label values never leave the
    original set plus ignore.  With scale_range (1, 1), flip off, zero jitter
    and crop equal to the canvas this is an exact passthrough.
    """
    image = np.asarray(image, dtype=np.float64)
    label = np.asarray(label)
    if image.shape[1:] != label.shape:
        raise ValueError(f"image shape {image.shape} does not match label shape {label.shape}")
    h, w = label.shape

    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else float(lo)
    if scale != 1.0:
        oh, ow = max(1, round(h * scale)), max(1, round(w * scale))
        image = resize_image(image, oh, ow)
        label = resize_labels_nearest(label, oh, ow)

    if cfg.flip and rng.random() < 0.5:
        image = flip_horizontal(image)
        label = flip_horizontal(label)

    if cfg.brightness_jitter:
        factor = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
        image = np.clip(image * factor, 0.0, 1.0)

    ch, cw = cfg.crop
    cur_h, cur_w = label.shape
    pad_h, pad_w = max(0, ch - cur_h), max(0, cw - cur_w)
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=cfg.ignore_label)
        cur_h, cur_w = label.shape
    oy = int(rng.integers(0, cur_h - ch + 1)) if cur_h > ch else 0
    ox = int(rng.integers(0, cur_w - cw + 1)) if cur_w > cw else 0
    image = np.ascontiguousarray(image[:, oy : oy + ch, ox : ox + cw])
    label = np.ascontiguousarray(label[oy : oy + ch, ox : ox + cw])
    return image, label


# ---------------------------------------------------------------------------
# inference


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _round_to_grid(size: int, scale: float, grid: int = 8) -> int:
    return max(grid, int(round(size * scale / grid)) * grid)


def infer_multiscale(images: np.ndarray, model: SegModel, cfg: InferConfig | None = None) -> np.ndarray:
    """Averaged softmax probabilities over scales (and mirrored copies).

    images: (n, 3, h, w).  Each scaled resolution is rounded to the model's
    stride-8 grid; probabilities are bilinearly resized back to (h, w) before
    averaging, which preserves per-pixel sums of one.
    """
    cfg = cfg or InferConfig()
    images = np.asarray(images, dtype=np.float64)
    n, _c, h, w = images.shape
    total = None
    count = 0
    with no_grad():
        for scale in cfg.scales:
            oh, ow = _round_to_grid(h, scale), _round_to_grid(w, scale)
            variants = [images]
            if cfg.flip:
                variants.append(flip_horizontal(images))
            for vi, var in enumerate(variants):
                x = np.einsum(
                    "ij,ncjk,lk->ncil", resize_matrix(h, oh), var, resize_matrix(w, ow),
                    optimize=True,
                )
                logits = model.forward(Tensor(x), training=False).data
                probs = softmax_probs(logits)
                probs = np.einsum(
                    "ij,ncjk,lk->ncil", resize_matrix(oh, h), probs, resize_matrix(ow, w),
                    optimize=True,
                )
                if vi == 1:
                    probs = flip_horizontal(probs)
                total = probs if total is None else total + probs
                count += 1
    return total / count


def predict(images: np.ndarray, model: SegModel, cfg: InferConfig | None = None) -> np.ndarray:
    return infer_multiscale(images, model, cfg).argmax(axis=1)


def evaluate(samples, model: SegModel, num_classes: int, cfg: InferConfig | None = None,
             batch_size: int = 8, ignore_label: int = 255):
    """Run inference over (image, label) samples; returns (per-class IoU, mIoU, cm)."""
    cm = ConfusionMatrix(num_classes, ignore_label)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.label for s in chunk])
        cm.update(predict(images, model, cfg), labels)
    per_class, mean = miou(cm)
    return per_class, mean, cm


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SegModel
    history: list = field(default_factory=list)
    val_miou: float | None = None
    val_per_class: np.ndarray | None = None


def iou_table(per_class: np.ndarray, mean: float) -> tuple[str, str]:
    """(plain-text, csv) per-class IoU tables with a trailing mean row."""
    lines = ["class  iou"]
    rows = ["class,iou"]
    for k, v in enumerate(per_class):
        text = "excluded" if np.isnan(v) else f"{v:.6f}"
        lines.append(f"{k:<6d} {text}")
        rows.append(f"{k},{'' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"mean   {mean:.6f}")
    rows.append(f"mean,{mean:.6f}")
    return "\n".join(lines) + "\n", "\n".join(rows) + "\n"


def _write_iou_tables(out_dir: Path, per_class: np.ndarray, mean: float):
    text, csv_text = iou_table(per_class, mean)
    (out_dir / "iou.txt").write_text(text)
    (out_dir / "iou.csv").write_text(csv_text)


def train_model(
    train_samples,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    val_samples=None,
    out_dir=None,
    infer_cfg: InferConfig | None = None,
    progress=None,
) -> TrainResult:
    """Full deterministic training run; optionally evaluates and checkpoints.

    Writes metrics.jsonl (one {iter, lr, loss} record per iteration), the
    final checkpoint directory, and per-class IoU tables when out_dir is set.
    """
    if not train_samples:
        raise ValueError("train_model needs a non-empty training set")
    root_ss = np.random.SeedSequence(cfg.seed)
    init_ss, order_ss = root_ss.spawn(2)
    model = SegModel(model_cfg, np.random.default_rng(init_ss))
    order_rng = np.random.default_rng(order_ss)
    opt = SGD(model.named_params(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    n = len(train_samples)
    perm = order_rng.permutation(n)
    cursor = 0
    epoch = 0
    history = []
    metrics_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "w")

    try:
        for it in range(cfg.max_iter):
            batch_idx = []
            for _ in range(cfg.batch_size):
                if cursor == n:
                    epoch += 1
                    perm = order_rng.permutation(n)
                    cursor = 0
                batch_idx.append((int(perm[cursor]), epoch))
                cursor += 1

            images, labels = [], []
            for idx, ep in batch_idx:
                s = train_samples[idx]
                rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ep, idx]))
                img, lab = augment(s.image, s.label, cfg, rng)
                images.append(img)
                labels.append(lab)
            batch = Tensor(np.stack(images))
            label_batch = np.stack(labels)

            logits = model.forward(batch, training=True)
            loss = cross_entropy_loss(logits, label_batch, cfg.ignore_label)
            model.zero_grad()
            backward(loss)
            lr = poly_lr(it, cfg)
            opt.step(lr)

            record = {"iter": it, "lr": lr, "loss": float(loss.data.reshape(()))}
            history.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
            if progress is not None:
                progress(record)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    result = TrainResult(model=model, history=history)
    if val_samples:
        per_class, mean, _cm = evaluate(val_samples, model, model_cfg.num_classes, infer_cfg,
                                        ignore_label=cfg.ignore_label)
        result.val_miou = mean
        result.val_per_class = per_class
        if out_dir is not None:
            _write_iou_tables(out_dir, per_class, mean)
    if out_dir is not None:
        state = order_rng.bit_generator.state
        model.save(out_dir / "checkpoint", iteration=cfg.max_iter, rng_state=state)
    return result
