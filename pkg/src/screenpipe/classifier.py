"""Small frozen-backbone CNN classifiers with a trainable dense head.

Two backbone styles are provided: ``vgg-ish`` (stacked 3x3 convolutions)
and ``inception-ish`` (parallel 1x1 / 3x3 / 5x5 branches). Backbones are
always frozen while the head trains, so their features are computed once
per image and cached.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from . import imgproc
from .errors import ConfigError, ContractError, DimensionError
from .evalkit import Prediction
from .nn import functional as F
from .nn.layers import Conv2d, Dense, Dropout, Layer, MaxPool2x2
from .nn.optim import Adam, make_optimizer
from .nn.tensor import Tensor

ARCHS = ("vgg-ish", "inception-ish")
NEGATIVE_CLASS, POSITIVE_CLASS = 0, 1


@dataclass
class ClassifierConfig:
    arch: str = "vgg-ish"
    input_size: int = 128
    head_widths: tuple = (64, 32)
    dropout: float = 0.5
    optimizer: str = "sgd-momentum"
    learning_rate: float = 1e-2
    decay: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 120
    augment: imgproc.AugmentSpec = field(default_factory=imgproc.AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if len(self.head_widths) != 2 or min(self.head_widths) < 1:
            raise ConfigError(f"head needs exactly two positive hidden widths, got {self.head_widths}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.input_size < 8 or self.input_size % 8:
            raise ConfigError(f"input size must be a positive multiple of 8, got {self.input_size}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def with_genome(self, genome):
        """Copy with the tuned hyperparameters of a GA genome."""
        d = dict(self.__dict__)
        d.update(learning_rate=genome.learning_rate, decay=genome.decay_factor, momentum=genome.momentum,
                 batch_size=genome.batch_size, dropout=genome.dropout, optimizer="sgd-momentum")
        return ClassifierConfig(**d)


# -- backbones ---------------------------------------------------------------

class VggStage(Layer):
    kind = "vgg-stage"

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.a = Conv2d(in_ch, out_ch, 3, rng=rng)
        self.b = Conv2d(out_ch, out_ch, 3, rng=rng)
        self.pool = MaxPool2x2()

    def children(self):
        return [self.a, self.b, self.pool]

    def forward(self, x):
        return self.pool(F.relu(self.b(F.relu(self.a(x)))))


class InceptionStage(Layer):
    """Parallel 1x1, 3x3 and 5x5 convolutions, concatenated, then pooled."""

    kind = "inception-stage"

    def __init__(self, in_ch, branch_ch, rng):
        super().__init__()
        self.branches = [Conv2d(in_ch, c, k, rng=rng) for c, k in zip(branch_ch, (1, 3, 5))]
        self.pool = MaxPool2x2()

    @property
    def out_channels(self):
        return sum(b.weight.shape[0] for b in self.branches)

    def children(self):
        return [*self.branches, self.pool]

    def forward(self, x):
        return self.pool(F.concat([F.relu(b(x)) for b in self.branches], axis=1))


class Backbone(Layer):
    kind = "backbone"

    def __init__(self, arch, stages, out_channels):
        super().__init__()
        self.arch = arch
        self.stages = stages
        self.out_channels = out_channels

    def children(self):
        return list(self.stages)

    def forward(self, x):
        for stage in self.stages:
            x = stage(x)
        return x


def build_backbone(arch, seed=0):
    """Three-stage frozen feature extractor (global pooling is applied by the head)."""
    rng = np.random.default_rng([seed, ARCHS.index(arch) if arch in ARCHS else 99])
    if arch == "vgg-ish":
        widths = (32, 32, 64)
        stages, cin = [], 3
        for w in widths:
            stages.append(VggStage(cin, w, rng))
            cin = w
        net = Backbone(arch, stages, cin)
    elif arch == "inception-ish":
        branch_widths = ((8, 12, 4), (16, 24, 8), (32, 48, 16))
        stages, cin = [], 3
        for bw in branch_widths:
            stage = InceptionStage(cin, bw, rng)
            stages.append(stage)
            cin = stage.out_channels
        net = Backbone(arch, stages, cin)
    else:
        raise ConfigError(f"unknown backbone arch {arch!r}; expected one of {ARCHS}")
    return net.freeze()


# -- full network ------------------------------------------------------------

class Classifier(Layer):
    """Backbone -> global average pool -> standardize -> dense -> dense -> 2-way softmax.

    The standardization statistics are buffers fitted on the training
    features by :func:`train_head`; the logit temperature is a buffer set by
    :func:`calibrate` (1 until then). The output layer starts at zero, so an
    untrained network scores every input at exactly 0.5.
    """

    kind = "classifier"

    def __init__(self, backbone, cfg):
        super().__init__()
        self.backbone = backbone
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 7])
        w1, w2 = cfg.head_widths
        self.fc1 = Dense(backbone.out_channels, w1, rng=rng)
        self.fc2 = Dense(w1, w2, rng=rng)
        self.out = Dense(w2, 2, zero_init=True)
        self.drop1 = Dropout(cfg.dropout, seed=cfg.seed * 2 + 1)
        self.drop2 = Dropout(cfg.dropout, seed=cfg.seed * 2 + 2)
        self.feat_mean = np.zeros(backbone.out_channels)
        self.feat_std = np.ones(backbone.out_channels)
        self.temperature = np.ones(1)

    def own_buffers(self):
        return [self.feat_mean, self.feat_std, self.temperature]

    def fit_standardization(self, features):
        self.feat_mean[:] = features.mean(axis=0)
        self.feat_std[:] = features.std(axis=0) + 1e-8

    def children(self):
        return [self.backbone, self.fc1, self.drop1, self.fc2, self.drop2, self.out]

    def head_parameters(self):
        return [p for layer in (self.fc1, self.fc2, self.out) for p in layer.parameters()]

    def forward_features(self, x):
        """Final convolutional feature map, N x C x h x w."""
        return self.backbone(x)

    def forward_head(self, fmap):
        """Logits from a feature map (or from pooled N x C features)."""
        pooled = F.global_avg_pool(fmap) if fmap.ndim == 4 else fmap
        z = (pooled - self.feat_mean) * (1.0 / self.feat_std)
        h = self.drop1(F.relu(self.fc1(z)))
        h = self.drop2(F.relu(self.fc2(h)))
        return self.out(h) * (1.0 / float(self.temperature[0]))

    def forward(self, x):
        return F.softmax(self.forward_head(self.forward_features(x)), axis=1)


def build_classifier(cfg, backbone=None):
    backbone = backbone if backbone is not None else build_backbone(cfg.arch, cfg.seed)
    return Classifier(backbone, cfg)


# -- inputs ------------------------------------------------------------------

def to_input(images, size=None, masks=None):
    """uint8 grayscale images (already preprocessed) -> N x 3 x H x W float.

    With ``masks``, pixels outside the lung fields are zeroed after
    normalization, so they sit at the channel mean instead of at black.
    """
    images = list(images)
    if masks is not None and len(masks) != len(images):
        raise DimensionError(f"{len(masks)} masks for {len(images)} images")
    arrays = []
    for k, img in enumerate(images):
        img = np.asarray(img)
        if size is not None and img.shape[:2] != (size, size):
            raise DimensionError(f"classifier expects {size}x{size} inputs, got {img.shape[:2]}")
        x = imgproc.normalize(imgproc.to_3channel(img))
        if masks is not None:
            m = np.asarray(masks[k]) > 0
            if m.shape != img.shape[:2]:
                raise DimensionError(f"mask {m.shape} does not match image {img.shape[:2]}")
            x *= m
        arrays.append(x)
    return np.stack(arrays) if arrays else np.zeros((0, 3, size or 0, size or 0))


def _features(backbone, x, batch_size=32):
    """Pooled backbone features for a float input batch."""
    out = []
    for i in range(0, len(x), batch_size):
        out.append(F.global_avg_pool(backbone(Tensor(x[i:i + batch_size]))).data)
    return np.concatenate(out) if out else np.zeros((0, backbone.out_channels))


def extract_features(net, images, masks=None, batch_size=32):
    """Pooled backbone features, N x C."""
    return _features(net.backbone, to_input(images, net.cfg.input_size, masks), batch_size)


# -- pretext pretraining -----------------------------------------------------

def pretrain_backbone(backbone, samples, steps, seed=0, size=64, learning_rate=1e-3, batch_size=8):
    """Teach the backbone local structure by regressing two area fractions.

    Targets per sample are the lung-mask area and the total lesion-box area,
    each as a fraction of the image and standardized over ``samples``. The
    backbone is unfrozen, trained with a throwaway linear regressor on its
    pooled features, then frozen again. Inputs go through the usual
    preprocessing at ``size``. Pass a corpus disjoint from the evaluation
    data to emulate transfer from a source task.
    """
    if steps <= 0:
        return backbone
    samples = [s for s in samples if s.mask is not None]
    if not samples:
        raise ConfigError("pretraining needs samples with masks")
    imgs = [imgproc.preprocess_u8(s.image, size) for s in samples]
    x = to_input(imgs)
    lung = [float((s.mask > 0).mean()) for s in samples]
    lesion = [sum((b.y1 - b.y0) * (b.x1 - b.x0) for b in s.lesion_boxes) / s.image.size for s in samples]
    y = np.stack([lung, lesion], axis=1)
    y = (y - y.mean(axis=0)) / (y.std(axis=0) + 1e-12)
    rng = np.random.default_rng([seed, 11])
    regressor = Dense(backbone.out_channels, 2, rng=rng)
    backbone.unfreeze()
    params = backbone.parameters() + regressor.parameters()
    opt = Adam(params, lr=learning_rate)
    try:
        for _ in range(steps):
            idx = rng.choice(len(x), size=min(batch_size, len(x)), replace=False)
            for p in params:
                p.grad = None
            pred = regressor(F.global_avg_pool(backbone(Tensor(x[idx]))))
            diff = pred - y[idx]
            loss = (diff * diff).mean()
            loss.backward()
            opt.step()
    finally:
        backbone.freeze()
    return backbone


# -- head training -----------------------------------------------------------

@dataclass
class ClfHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in zip(self.epoch, self.train_loss, self.train_acc, self.val_loss, self.val_acc):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _one_hot(labels):
    t = np.zeros((len(labels), 2))
    t[np.arange(len(labels)), labels] = 1.0
    return t


def _score(net, feats, labels):
    if len(labels) == 0:
        return float("nan"), float("nan")
    net.eval()
    logits = net.forward_head(Tensor(feats))
    loss = float(F.softmax_cross_entropy(logits, _one_hot(labels)).data)
    return loss, float(np.mean(np.argmax(logits.data, axis=1) == labels))


def train_head(net, images, labels, cfg=None, val_images=(), val_labels=(), masks=None, val_masks=None,
               features=None, val_features=None, keep_best=False):
    """Train the dense head with softmax cross-entropy on frozen features.

    ``images`` are preprocessed uint8 grayscale arrays with optional lung
    ``masks`` (see :func:`to_input`). Precomputed pooled features may be
    passed instead to skip the backbone pass; they are ignored when
    augmentation is enabled. With ``keep_best`` and validation data, the
    head weights from the epoch with the highest validation accuracy (lowest
    validation loss among ties, earliest among exact ties) are restored at
    the end. Returns ``(net, history)``.
    """
    cfg = cfg or net.cfg
    if not net.backbone.frozen:
        raise ContractError("backbone must be frozen before head training")
    labels = np.asarray(labels, dtype=int)
    val_labels = np.asarray(val_labels, dtype=int)
    augmenting = not cfg.augment.is_identity
    if features is None or augmenting:
        x = to_input(images, cfg.input_size, masks)
        features = None if augmenting else _features(net.backbone, x)
    if val_features is None:
        val_features = _features(net.backbone, to_input(val_images, cfg.input_size, val_masks))
    net.fit_standardization(features if features is not None else _features(net.backbone, x))
    net.temperature[:] = 1.0
    history = ClfHistory()
    opt = make_optimizer(cfg.optimizer, net.head_parameters(), cfg.learning_rate, cfg.decay, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 3])
    for layer, s in ((net.drop1, 2 * cfg.seed + 1), (net.drop2, 2 * cfg.seed + 2)):
        layer.rate = cfg.dropout
        layer.reseed(s)
    best = None
    for epoch in range(1, cfg.epochs + 1):
        if augmenting:
            pairs = [imgproc.augment(img, None if masks is None else masks[k],
                                     cfg.augment.with_seed(int(rng.integers(2**63))))
                     for k, img in enumerate(images)]
            aug_masks = None if masks is None else [m for _, m in pairs]
            feats = _features(net.backbone, to_input([a for a, _ in pairs], cfg.input_size, aug_masks))
        else:
            feats = features
        net.train()
        order = rng.permutation(len(labels))
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for p in net.head_parameters():
                p.grad = None
            logits = net.forward_head(Tensor(feats[idx]))
            loss = F.softmax_cross_entropy(logits, _one_hot(labels[idx]))
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        va_loss, va_acc = _score(net, val_features, val_labels)
        history.epoch.append(epoch)
        history.train_loss.append(total / len(labels))
        history.train_acc.append(correct / len(labels))
        history.val_loss.append(va_loss)
        history.val_acc.append(va_acc)
        if keep_best and len(val_labels) and (best is None or (va_acc, -va_loss) > best[0]):
            best = ((va_acc, -va_loss), [p.data.copy() for p in net.head_parameters()])
    if best is not None:
        for p, saved in zip(net.head_parameters(), best[1]):
            p.data[...] = saved
    net.eval()
    return net, history


def calibrate(net, labels, images=None, masks=None, features=None):
    """Fit the logit temperature on held-out data by minimising the NLL.

    Accuracy at the 0.5 threshold is unchanged; only the confidence of the
    probabilities moves, which matters when members are averaged into an
    ensemble. Returns the fitted temperature.
    """
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise DimensionError("calibration needs at least one labelled sample")
    if features is None:
        features = extract_features(net, images, masks)
    was_training = net.training
    net.eval()
    net.temperature[:] = 1.0
    logits = net.forward_head(Tensor(features)).data
    net.train(was_training)
    rows = np.arange(len(labels))

    def nll(log_t):
        return -float(np.mean(special.log_softmax(logits / np.exp(log_t), axis=1)[rows, labels]))

    net.temperature[:] = float(np.exp(optimize.minimize_scalar(nll, bounds=(-5.0, 5.0), method="bounded").x))
    return float(net.temperature[0])


def predict_proba(net, images, ids=None, masks=None, threshold=0.5, features=None):
    """Softmax probabilities as :class:`Prediction` records, in input order."""
    if features is None:
        features = extract_features(net, images, masks)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(features))]
    if len(ids) != len(features):
        raise DimensionError(f"{len(ids)} ids for {len(features)} images")
    was_training = net.training
    net.eval()
    probs = F.softmax(net.forward_head(Tensor(features)), axis=1).data
    net.train(was_training)
    return [Prediction.from_prob(i, p[POSITIVE_CLASS], threshold) for i, p in zip(ids, probs)]


def predictions_csv(preds):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "prob_positive", "label"])
    for p in preds:
        w.writerow([p.id, repr(float(p.prob_positive)), p.label])
    return buf.getvalue()


def read_predictions_csv(text):
    rows = csv.DictReader(io.StringIO(text))
    return [Prediction(r["id"], float(r["prob_positive"]), int(r["label"])) for r in rows]
