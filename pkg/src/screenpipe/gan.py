"""DCGAN image synthesis and PSNR-based selection of generated images."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgproc
from .errors import ConfigError, DataError, DimensionError, TrainingDivergedError
from .nn import functional as F
from .nn import snapshot
from .nn.layers import (BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Flatten, LeakyReLU, ReLU, Reshape, Sequential,
                        Sigmoid, Tanh)
from .nn.optim import Adam
from .nn.tensor import Tensor

OUTPUT_SIZES = (32, 64, 128)


@dataclass
class GanConfig:
    latent_dim: int = 64
    output_size: int = 32
    base_channels: int = 32
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.output_size not in OUTPUT_SIZES:
            raise ConfigError(f"output_size must be one of {OUTPUT_SIZES}, got {self.output_size}")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ConfigError("latent_dim and base_channels must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be positive")

    @property
    def stages(self):
        return int(math.log2(self.output_size // 4))


def build_generator(cfg):
    """latent -> dense -> 4x4 map -> stride-2 transposed convs -> tanh image."""
    rng = np.random.default_rng([cfg.seed, 21])
    n = cfg.stages
    top = cfg.base_channels * 2 ** (n - 1)
    layers = [Dense(cfg.latent_dim, top * 16, rng=rng), Reshape(top, 4, 4), BatchNorm2d(top), ReLU()]
    ch = top
    for i in range(n):
        last = i == n - 1
        out = 1 if last else ch // 2
        layers.append(ConvTranspose2d(ch, out, kernel=4, stride=2, padding=1, rng=rng))
        if not last:
            layers += [BatchNorm2d(out), ReLU()]
        ch = out
    return Sequential(*layers, Tanh())


def build_discriminator(cfg):
    """Stride-2 convs with leaky ReLU (slope 0.2) -> dense -> sigmoid."""
    rng = np.random.default_rng([cfg.seed, 22])
    layers, ch = [], 1
    for i in range(cfg.stages):
        out = cfg.base_channels * 2 ** i
        layers += [Conv2d(ch, out, kernel=4, stride=2, padding=1, rng=rng), LeakyReLU(0.2)]
        ch = out
    return Sequential(*layers, Flatten(), Dense(ch * 16, 1, rng=rng), Sigmoid())


# -- training ----------------------------------------------------------------

@dataclass
class GanSnapshot:
    epoch: int
    generator: bytes
    discriminator: bytes
    steps: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)


@dataclass
class GanRun:
    generator: Sequential
    discriminator: Sequential
    snapshots: list
    steps: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    g_loss: list = field(default_factory=list)

    def loss_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "d_loss", "g_loss"])
        for row in zip(self.steps, self.d_loss, self.g_loss):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
        return buf.getvalue()


def to_unit_range(images, size):
    """uint8 images -> N x 1 x size x size floats in [-1, 1]."""
    out = [imgproc.resize_bilinear(np.asarray(img), size, size) for img in images]
    return np.stack(out).astype(np.float64)[:, None] / 127.5 - 1.0


def from_unit_range(x):
    return imgproc._to_u8((np.asarray(x) + 1.0) * 127.5)


def latent(n, dim, rng):
    return rng.standard_normal((n, dim))


def _backward(loss, step, opt, who):
    """Backpropagate a finite loss; anything non-finite aborts with diagnostics."""
    v = float(loss.data)
    where = f"at step {step} (lr={opt.effective_lr})"
    if not math.isfinite(v):
        raise TrainingDivergedError(f"{who} loss became {v} {where}")
    try:
        loss.backward()
    except FloatingPointError as exc:
        raise TrainingDivergedError(f"{who} gradients became non-finite {where}") from exc
    return v


def discriminator_step(G, D, opt_d, real, rng, latent_dim, step=0):
    """One D update on a real batch and an equal-size fake batch; returns the loss."""
    n = real.shape[0]
    G.eval()
    fake = G(Tensor(latent(n, latent_dim, rng))).data
    G.train()
    D.zero_grad()
    loss = F.binary_cross_entropy(D(Tensor(real)), np.ones((n, 1))) + \
        F.binary_cross_entropy(D(Tensor(fake)), np.zeros((n, 1)))
    v = _backward(loss, step, opt_d, "discriminator")
    opt_d.step()
    return v


def generator_step(G, D, opt_g, n, rng, latent_dim, step=0):
    """One G update with fakes labelled real; D's gradients are discarded."""
    G.zero_grad()
    D.freeze()
    try:
        loss = F.binary_cross_entropy(D(G(Tensor(latent(n, latent_dim, rng)))), np.ones((n, 1)))
        v = _backward(loss, step, opt_g, "generator")
    finally:
        D.unfreeze()
    opt_g.step()
    return v


def dcgan_epochs(real_images, cfg=None, generator=None, discriminator=None):
    """Train adversarially, yielding ``(GanSnapshot, G, D)`` after each epoch.

    ``real_images`` are uint8 arrays, resized to ``cfg.output_size`` and
    scaled to [-1, 1]. Each step is one discriminator update followed by one
    generator update. Zero epochs yields nothing.
    """
    cfg = cfg or GanConfig()
    real = to_unit_range(real_images, cfg.output_size)
    if len(real) < cfg.batch_size:
        raise DataError(f"need at least batch_size={cfg.batch_size} real images, got {len(real)}")
    G = generator or build_generator(cfg)
    D = discriminator or build_discriminator(cfg)
    opt_g = Adam(G.trainable_parameters(), lr=cfg.lr_generator, betas=(cfg.beta1, 0.999))
    opt_d = Adam(D.trainable_parameters(), lr=cfg.lr_discriminator, betas=(cfg.beta1, 0.999))
    rng = np.random.default_rng([cfg.seed, 23])
    step = 0
    G.train()
    D.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(real))
        steps, d_hist, g_hist = [], [], []
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            batch = real[order[start:start + cfg.batch_size]]
            d = discriminator_step(G, D, opt_d, batch, rng, cfg.latent_dim, step)
            g = generator_step(G, D, opt_g, cfg.batch_size, rng, cfg.latent_dim, step)
            steps.append(step)
            d_hist.append(d)
            g_hist.append(g)
            step += 1
        yield GanSnapshot(epoch, snapshot.dumps(G), snapshot.dumps(D), steps, d_hist, g_hist), G, D


def dcgan_train(real_images, cfg=None, on_epoch=None):
    """Run all epochs; returns a :class:`GanRun`. ``on_epoch`` sees each snapshot."""
    cfg = cfg or GanConfig()
    G, D = build_generator(cfg), build_discriminator(cfg)
    run = GanRun(G, D, [])
    for snap, _, _ in dcgan_epochs(real_images, cfg, G, D):
        run.snapshots.append(snap)
        run.steps += snap.steps
        run.d_loss += snap.d_loss
        run.g_loss += snap.g_loss
        if on_epoch:
            on_epoch(snap)
    G.eval()
    return run


def generate(G, n, latent_dim, seed=0):
    """``n`` uint8 images from latent draws seeded by ``seed``."""
    was = G.training
    G.eval()
    out = G(Tensor(latent(n, latent_dim, np.random.default_rng(seed)))).data
    G.train(was)
    return [from_unit_range(x[0]) for x in out]


def sample_grid(images, cols=4, pad=1):
    """Tile equal-size uint8 images into one grid image."""
    if not images:
        raise DataError("no images to tile")
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), np.uint8)
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = img
    return grid


def save_grid(path, images, cols=4):
    imgproc.write_pnm(Path(path), sample_grid(images, cols))


# -- quality selection -------------------------------------------------------

def psnr(a, b):
    """Peak signal-to-noise ratio in dB for 8-bit images; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def select_generated(candidates, reference_pool, k):
    """Top-``k`` candidates by their best PSNR against any reference.

    Returns ``(indices, scores)`` with ties broken by candidate index.
    """
    if not reference_pool:
        raise ConfigError("reference pool is empty")
    if not 0 <= k <= len(candidates):
        raise ConfigError(f"k={k} must be between 0 and {len(candidates)}")
    scores = [max(psnr(c, r) for r in reference_pool) for c in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))[:k]
    return order, [scores[i] for i in order]
