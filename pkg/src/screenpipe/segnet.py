"""UNET lung-field segmentation trained with soft Dice loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgproc
from .errors import ConfigError, DataError, DimensionError
from .nn import functional as F
from .nn.layers import Conv2d, Layer, MaxPool2x2, Upsample2x
from .nn.optim import Adam
from .nn.tensor import Tensor

DICE_EPS = 1.0


@dataclass
class UnetConfig:
    depth: int = 3
    base_channels: int = 16
    size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 8
    augment: imgproc.AugmentSpec = field(default_factory=imgproc.AugmentSpec)
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.size < 1 or self.size % (2 ** self.depth):
            raise ConfigError(f"input size {self.size} is not divisible by 2**depth = {2 ** self.depth}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


class _DoubleConv(Layer):
    kind = "double-conv"

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.a = Conv2d(in_ch, out_ch, 3, rng=rng)
        self.b = Conv2d(out_ch, out_ch, 3, rng=rng)

    def children(self):
        return [self.a, self.b]

    def forward(self, x):
        return F.relu(self.b(F.relu(self.a(x))))


class Unet(Layer):
    """Encoder/decoder with channel-concatenated skips and a sigmoid head.

    ``forward`` returns N x 1 x H x W probabilities; ``skips`` holds the
    encoder activations of the most recent call, finest level first.
    """

    kind = "unet"

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c = cfg.base_channels
        self.down = []
        in_ch = 1
        for level in range(cfg.depth):
            self.down.append(_DoubleConv(in_ch, c * 2 ** level, rng))
            in_ch = c * 2 ** level
        self.bottleneck = _DoubleConv(in_ch, c * 2 ** cfg.depth, rng)
        self.up = []
        in_ch = c * 2 ** cfg.depth
        for level in reversed(range(cfg.depth)):
            out_ch = c * 2 ** level
            self.up.append(_DoubleConv(in_ch + out_ch, out_ch, rng))
            in_ch = out_ch
        self.head = Conv2d(in_ch, 1, 1, padding=0, rng=rng)
        self.pool = MaxPool2x2()
        self.upsample = Upsample2x()
        self.skips = []

    def children(self):
        return [*self.down, self.bottleneck, *self.up, self.head]

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"UNET expects N x 1 x H x W input, got {x.shape}")
        if x.shape[2] % 2 ** self.cfg.depth or x.shape[3] % 2 ** self.cfg.depth:
            raise ConfigError(f"spatial size {x.shape[2:]} not divisible by 2**{self.cfg.depth}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = block(F.concat([self.upsample(x), skip], axis=1))
        self.skips = skips
        return F.sigmoid(self.head(x))


def build_unet(cfg=None):
    return Unet(cfg or UnetConfig())


def unet_parameter_count(depth, base_channels):
    """Closed-form parameter count: each 3x3 conv has 9*cin*cout + cout."""

    def conv(cin, cout, k=3):
        return k * k * cin * cout + cout

    total, cin = 0, 1
    for level in range(depth):
        cout = base_channels * 2 ** level
        total += conv(cin, cout) + conv(cout, cout)
        cin = cout
    cout = base_channels * 2 ** depth
    total += conv(cin, cout) + conv(cout, cout)
    cin = cout
    for level in reversed(range(depth)):
        cout = base_channels * 2 ** level
        total += conv(cin + cout, cout) + conv(cout, cout)
        cin = cout
    return total + conv(cin, 1, k=1)


# -- Dice --------------------------------------------------------------------

def _as_bool(mask):
    return np.asarray(mask) > 0


def dice_coefficient(gs, seg):
    """2|A & B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = _as_bool(gs), _as_bool(seg)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_loss(pred, gs, eps=DICE_EPS):
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)``.

    ``gs`` may be a {0,1} float array or a {0,255} mask; it is summed over
    the whole batch.
    """
    g = _as_bool(gs).astype(np.float64)
    if g.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {g.shape}")
    inter = (pred * g).sum()
    return 1.0 - (inter * 2.0 + eps) / (pred.sum() + (float(g.sum()) + eps))


# -- training ----------------------------------------------------------------

@dataclass
class SegHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_dsc: list = field(default_factory=list)
    val_dsc: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "train_dsc", "val_dsc"])
        for row in zip(self.epoch, self.train_loss, self.val_loss, self.train_dsc, self.val_dsc):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _scaled_pair(sample, size):
    if sample.mask is None:
        raise DataError(f"sample {sample.id!r} has no lung mask")
    img = np.asarray(sample.image)
    if img.ndim == 3:
        img = imgproc._to_u8(img.astype(np.float64).mean(axis=2))
    return imgproc.resize_bilinear(img, size, size), imgproc.resize_nearest(sample.mask, size, size)


def _net_input(images):
    return np.stack(images).astype(np.float64)[:, None] / 255.0


def _evaluate(net, images, masks, threshold, batch_size):
    if not images:
        return float("nan"), float("nan")
    losses, scores = [], []
    net.eval()
    for i in range(0, len(images), batch_size):
        probs = net(_net_input(images[i:i + batch_size]))
        tgt = np.stack(masks[i:i + batch_size])[:, None]
        for p, t in zip(probs.data, tgt):
            losses.append(float(dice_loss(Tensor(p), t).data))
            scores.append(dice_coefficient(t, p >= threshold))
    return float(np.mean(losses)), float(np.mean(scores))


def train_segmenter(train_samples, cfg=None, val_samples=(), net=None, log=None):
    """Train a UNET on lung masks with Adam and soft Dice loss.

    Returns ``(net, history)``. Mini-batch order and augmentation draws are
    derived from ``cfg.seed``.
    """
    cfg = cfg or UnetConfig()
    net = net or build_unet(cfg)
    train = [_scaled_pair(s, cfg.size) for s in train_samples]
    val = [_scaled_pair(s, cfg.size) for s in val_samples]
    history = SegHistory()
    if cfg.epochs == 0:
        return net, history
    if not train:
        raise DataError("no training samples")
    opt = Adam(net.trainable_parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = rng.permutation(len(train))
        losses, scores = [], []
        for start in range(0, len(order), cfg.batch_size):
            imgs, masks = [], []
            for i in order[start:start + cfg.batch_size]:
                img, mask = train[i]
                if not cfg.augment.is_identity:
                    img, mask = imgproc.augment(img, mask, cfg.augment.with_seed(int(rng.integers(2**63))))
                imgs.append(img)
                masks.append(mask)
            net.zero_grad()
            target = np.stack(masks)[:, None]
            probs = net(_net_input(imgs))
            loss = dice_loss(probs, target)
            loss.backward()
            opt.step()
            losses.append(float(loss.data) * len(imgs))
            scores.extend(dice_coefficient(t, p >= cfg.threshold) for p, t in zip(probs.data, target))
        # training-set figures are averaged over the epoch's batches, before each update
        tr_loss, tr_dsc = sum(losses) / len(train), float(np.mean(scores))
        va_loss, va_dsc = _evaluate(net, [p[0] for p in val], [p[1] for p in val], cfg.threshold, cfg.batch_size)
        history.epoch.append(epoch)
        history.train_loss.append(tr_loss)
        history.val_loss.append(va_loss)
        history.train_dsc.append(tr_dsc)
        history.val_dsc.append(va_dsc)
        if log:
            log(f"epoch {epoch}: train loss {tr_loss:.4f} train dsc {tr_dsc:.4f} val dsc {va_dsc:.4f}")
    net.eval()
    return net, history


def segment(net, image, threshold=None):
    """Binary {0,255} lung mask with the same dims as ``image``."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = imgproc._to_u8(img.astype(np.float64).mean(axis=2))
    h, w = img.shape
    size = net.cfg.size
    threshold = net.cfg.threshold if threshold is None else threshold
    was_training = net.training
    net.eval()
    probs = net(_net_input([imgproc.resize_bilinear(img, size, size)])).data[0, 0]
    net.train(was_training)
    if (h, w) != (size, size):
        probs = imgproc._resize_float(probs, h, w)
    return np.where(probs >= threshold, 255, 0).astype(np.uint8)


def apply_mask(image, mask):
    """Zero every pixel outside the mask."""
    image = np.asarray(image)
    mask = _as_bool(mask)
    if image.shape[:2] != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[~mask] = 0
    return out


def difference_map(a, b):
    """Symmetric difference as white (255) on black."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return np.where(a ^ b, 255, 0).astype(np.uint8)


def save_mask(path, mask):
    imgproc.write_pnm(Path(path), np.where(_as_bool(mask), 255, 0).astype(np.uint8))
