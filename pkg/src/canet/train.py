"""Training machinery: weighted cross-entropy, Adam, poly LR schedule,
augmentation, a synthetic segmentation task, and the training loop.

The protocol: per epoch, shuffle and augment the training set, run
forward/backward in float32, update with Adam at the poly-scheduled
learning rate, then validate with batch-norm in eval mode (running
statistics) and report mean IoU. Class weights may be given explicitly
or derived from training-set label frequencies as 1/ln(1.02 + freq).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DataError, TrainingError
from .metrics import ConfusionMatrix, miou
from .tensor import DTYPE, Tape, Tensor, record


@dataclass
class TrainConfig:
    init_lr: float = 1e-4
    max_epoch: int = 30
    poly_power: float = 0.9
    batch_size: int = 4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    scale_range: Tuple[float, float] = (0.5, 2.0)
    crop: Tuple[int, int] = (32, 32)
    ignore_label: int = 255
    class_weights: Union[str, Sequence[float]] = "auto"
    decoupled_decay: bool = True  # False applies weight decay through the moments (coupled L2)

    def __post_init__(self):
        if self.init_lr <= 0:
            raise ConfigError(f"init_lr must be positive, got {self.init_lr}")
        if self.poly_power <= 0:
            raise ConfigError(f"poly_power must be positive, got {self.poly_power}")
        if self.max_epoch < 1:
            raise ConfigError(f"max_epoch must be >= 1, got {self.max_epoch}")
        lo, hi = self.scale_range
        if lo > hi or lo <= 0:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if not isinstance(self.class_weights, str):
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or (w <= 0).any():
                raise ConfigError("explicit class_weights must be positive and one per class")
        elif self.class_weights != "auto":
            raise ConfigError(f"class_weights must be 'auto' or a list, got {self.class_weights!r}")


def poly_lr(epoch: int, config: TrainConfig) -> float:
    """init_lr × (1 − epoch/max_epoch)^poly_power, stepped per epoch.

    Evaluated in extended precision: chaining a rounded quotient through
    pow and a multiply in float64 drifts up to 2 ulp from the real value,
    while one final rounding from np.longdouble (64-bit mantissa on x86)
    keeps every schedule value within 1 ulp. The quotient is written
    (max_epoch − epoch)/max_epoch rather than 1 − epoch/max_epoch, which
    cancels catastrophically near the end of the schedule.
    """
    if not 0 <= epoch <= config.max_epoch:
        raise ContractError(f"epoch {epoch} outside [0, {config.max_epoch}]")
    long = np.longdouble
    base = (long(config.max_epoch) - long(epoch)) / long(config.max_epoch)
    return float(long(config.init_lr) * base ** long(config.poly_power))


# ---------------------------------------------------------------------------
# loss


def weighted_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    weights: np.ndarray,
    ignore_label: int = 255,
) -> Tensor:
    """Weighted softmax cross-entropy over pixels, mean-normalized by the
    summed weights of the counted pixels. Ignored pixels contribute
    nothing to the value or the gradient; if every pixel is ignored the
    loss is exactly 0."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DataError(f"labels shape {labels.shape} != {(n, h, w)}")
    weights = np.asarray(weights, dtype=logits.data.dtype)
    if weights.shape != (c,):
        raise DataError(f"expected {c} class weights, got shape {weights.shape}")
    bad = (labels != ignore_label) & ((labels < 0) | (labels >= c))
    if bad.any():
        raise DataError(
            f"label value {int(labels[bad][0])} outside [0, {c}) and not ignore ({ignore_label})"
        )
    valid = labels != ignore_label
    safe = np.where(valid, labels, 0).astype(np.int64)

    z = logits.data
    zs = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp_y = np.take_along_axis(zs - logsumexp, safe[:, None], axis=1)[:, 0]
    wpix = weights[safe] * valid
    wsum = wpix.sum()
    value = -(wpix * logp_y).sum() / wsum if wsum > 0 else 0.0
    out = Tensor(np.asarray(value, dtype=z.dtype), dtype=z.dtype)

    def rule(g):
        if wsum <= 0:
            return [np.zeros_like(z)]
        p = np.exp(zs - logsumexp)
        grad = p * wpix[:, None]
        at_y = np.take_along_axis(grad, safe[:, None], axis=1) - wpix[:, None]
        np.put_along_axis(grad, safe[:, None], at_y, axis=1)
        grad *= g / wsum
        return [grad]

    return record(out, [logits], rule)


def auto_class_weights(samples: Sequence["SyntheticSample"], num_classes: int, ignore_label: int = 255) -> np.ndarray:
    """1/ln(1.02 + freq) weights from the label frequencies of a dataset."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        lab = s.label[s.label != ignore_label]
        counts += np.bincount(lab.reshape(-1), minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1)
    return (1.0 / np.log(1.02 + freq)).astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; weight decay decoupled by default
    (p ← p − lr·wd·p before the moment update), or folded into the
    gradient when `decoupled_decay` is off."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], config: TrainConfig):
        self.params = list(named_params)
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {name}")
            if cfg.weight_decay:
                if cfg.decoupled_decay:
                    p.data -= lr * cfg.weight_decay * p.data
                else:
                    g = g + cfg.weight_decay * p.data
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(image: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Channel-first bilinear resize, align-corners-false."""
    c, h, w = image.shape
    if (oh, ow) == (h, w):
        return image.copy()

    def taps(size, out):
        src = np.clip((np.arange(out) + 0.5) * (size / out) - 0.5, 0, size - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, (src - i0).astype(image.dtype)

    r0, r1, tr = taps(h, oh)
    c0, c1, tc = taps(w, ow)
    rows = image[:, r0, :] * (1 - tr)[None, :, None] + image[:, r1, :] * tr[None, :, None]
    return rows[:, :, c0] * (1 - tc) + rows[:, :, c1] * tc


def _resize_nearest(label: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = label.shape
    ri = np.minimum(((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), h - 1)
    ci = np.minimum(((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), w - 1)
    return label[ri][:, ci]


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-channel zero mean, unit variance.

    Statistics are computed in float64 so a constant channel maps to
    exactly zero; in float32 the mean's rounding error, amplified by the
    standard-deviation floor, would leave visible residue."""
    x = image.astype(np.float64)
    mean = x.mean(axis=(1, 2), keepdims=True)
    std = x.std(axis=(1, 2), keepdims=True)
    return ((x - mean) / np.maximum(std, 1e-6)).astype(DTYPE)


def apply_augment(
    image: np.ndarray,
    label: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip, random scale, crop/pad to config.crop,
    then per-channel normalization. Image is bilinear-resampled, the
    label map nearest-resampled; padding uses 0 for the image and the
    ignore label for the label map."""
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
        label = label[:, ::-1]
    s = rng.uniform(*config.scale_range)
    h, w = label.shape
    nh, nw = max(1, round(h * s)), max(1, round(w * s))
    image = _resize_bilinear(image, nh, nw)
    label = _resize_nearest(label, nh, nw)

    ch, cw = config.crop
    pad_h, pad_w = max(0, ch - nh), max(0, cw - nw)
    if pad_h or pad_w:
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=config.ignore_label)
        nh, nw = max(nh, ch), max(nw, cw)
    y0 = rng.integers(0, nh - ch + 1)
    x0 = rng.integers(0, nw - cw + 1)
    image = image[:, y0 : y0 + ch, x0 : x0 + cw]
    label = label[y0 : y0 + ch, x0 : x0 + cw]
    return normalize_image(image), np.ascontiguousarray(label)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticSample:
    image: np.ndarray  # 3×H×W float32
    label: np.ndarray  # H×W int32, values in [0, num_classes) (∪ ignore after padding)


def class_palette(num_classes: int) -> np.ndarray:
    """Distinct RGB color per class; class 0 (background) is dark gray."""
    colors = [(0.25, 0.25, 0.25)]
    for k in range(1, num_classes):
        hue = (k - 1) / max(num_classes - 1, 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.85, 0.9))
    return np.asarray(colors, dtype=np.float64)


def make_synthetic_dataset(
    num_classes: int,
    n: int,
    size: int,
    seed: int,
    noise_sigma: float = 0.1,
) -> List[SyntheticSample]:
    """One or two large, non-overlapping colored shapes (axis-aligned
    rectangles and circles) on a textured background; the label map is the
    shape class per pixel (background 0). Shape extents stay around a third
    to two thirds of the image so boundaries remain resolvable through the
    stride-8 feature maps. Deterministic in `seed`; every foreground class
    appears in the set."""
    if num_classes < 2:
        raise ConfigError(f"synthetic task needs >= 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    palette = class_palette(num_classes)
    yy, xx = np.mgrid[0:size, 0:size]
    samples = []
    for i in range(n):
        # Textured background: coarse noise blocks over the base color.
        coarse = rng.normal(0.0, 0.05, (3, (size + 7) // 8, (size + 7) // 8))
        texture = coarse.repeat(8, axis=1).repeat(8, axis=2)[:, :size, :size]
        image = palette[0].reshape(3, 1, 1) + texture
        label = np.zeros((size, size), dtype=np.int32)

        k = int(rng.integers(1, 3))
        classes = [1 + (i % (num_classes - 1))]  # guarantees class coverage
        classes += list(rng.integers(1, num_classes, size=k - 1))
        occupied = np.zeros((size, size), dtype=bool)
        for cls in classes:
            for _ in range(8):  # place without touching earlier shapes
                if rng.random() < 0.5:
                    sh = int(rng.integers(3 * size // 8, 5 * size // 8 + 1))
                    sw = int(rng.integers(3 * size // 8, 5 * size // 8 + 1))
                    y0 = int(rng.integers(0, size - sh + 1))
                    x0 = int(rng.integers(0, size - sw + 1))
                    mask = np.zeros((size, size), dtype=bool)
                    mask[y0 : y0 + sh, x0 : x0 + sw] = True
                else:
                    r = int(rng.integers(size // 4, size // 3 + 1))
                    cy = int(rng.integers(r, size - r + 1))
                    cx = int(rng.integers(r, size - r + 1))
                    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                if not (mask & occupied).any():
                    break
            else:
                continue  # no free spot for this shape; skip it
            occupied |= mask
            image = np.where(mask[None], palette[cls].reshape(3, 1, 1), image)
            label[mask] = cls
        image = image + rng.normal(0.0, noise_sigma, image.shape)
        samples.append(
            SyntheticSample(np.clip(image, 0.0, 1.0).astype(DTYPE), label)
        )
    return samples


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val_miou: float

    def render(self) -> str:
        return f"epoch={self.epoch} lr={self.lr:.8g} loss={self.loss:.6f} val_miou={self.val_miou:.6f}"


@dataclass
class TrainReport:
    records: List[EpochRecord] = field(default_factory=list)
    class_weights: Optional[np.ndarray] = None

    @property
    def final_val_miou(self) -> float:
        return self.records[-1].val_miou

    def render(self) -> str:
        lines = [r.render() for r in self.records]
        lines.append(
            f"summary epochs={len(self.records)} "
            f"final_loss={self.records[-1].loss:.6f} final_val_miou={self.final_val_miou:.6f}"
        )
        return "\n".join(lines)


def resolve_class_weights(
    config: TrainConfig, train_set: Sequence[SyntheticSample], num_classes: int
) -> np.ndarray:
    if isinstance(config.class_weights, str):
        return auto_class_weights(train_set, num_classes, config.ignore_label)
    w = np.asarray(config.class_weights, dtype=np.float64)
    if w.shape != (num_classes,):
        raise ConfigError(f"need {num_classes} class weights, got {w.shape}")
    return w


def evaluate(model, val_set: Sequence[SyntheticSample], num_classes: int, ignore_label: int) -> float:
    """Validation mIoU with batch norm in eval mode (running statistics)."""
    model.eval()
    cm = ConfusionMatrix(num_classes, ignore_label)
    for s in val_set:
        x = Tensor(normalize_image(s.image)[None])
        cm.accumulate(model.predict(x)[0], s.label)
    model.train()
    return miou(cm)


def train_loop(
    model,
    train_set: Sequence[SyntheticSample],
    val_set: Sequence[SyntheticSample],
    config: TrainConfig,
    seed: int = 0,
    callback: Optional[Callable[[EpochRecord], None]] = None,
    checkpoint_path: Optional[str] = None,
    checkpoint_every: int = 0,
) -> TrainReport:
    """Run the full protocol and return the per-epoch report."""
    num_classes = model.config.num_classes
    rng = np.random.default_rng(seed)
    weights = resolve_class_weights(config, train_set, num_classes)
    optimizer = Adam(list(model.named_parameters()), config)
    report = TrainReport(class_weights=weights)
    model.train()

    for epoch in range(config.max_epoch):
        lr = poly_lr(epoch, config)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[j] for j in order[start : start + config.batch_size]]
            pairs = [apply_augment(s.image, s.label, config, rng) for s in batch]
            images = Tensor(np.stack([p[0] for p in pairs]))
            labels = np.stack([p[1] for p in pairs])
            with Tape():
                logits = model(images)
                loss = weighted_cross_entropy(logits, labels, weights, config.ignore_label)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, step {start // config.batch_size}"
                    )
                loss.backward()
            optimizer.step(lr)
            optimizer.zero_grad()
            losses.append(loss.item())
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=float(np.mean(losses)),
            val_miou=evaluate(model, val_set, num_classes, config.ignore_label),
        )
        report.records.append(rec)
        if callback:
            callback(rec)
        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            model.save_weights(checkpoint_path)
    if checkpoint_path:
        model.save_weights(checkpoint_path)
    return report
