"""Gradient-weighted class activation maps and heatmap overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgproc
from .errors import ConfigError, ContractError, DimensionError
from .nn.tensor import Tensor

# blue -> cyan -> green -> yellow -> red at 0, 1/4, 1/2, 3/4, 1
COLORMAP_STOPS = np.array([
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
], dtype=np.float64)


@dataclass
class Heatmap:
    grid: np.ndarray
    upsampled: np.ndarray
    target_class: int

    @property
    def peak(self):
        """(row, col) of the upsampled maximum; first in raster order on ties."""
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.upsampled), self.upsampled.shape))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.grid:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _normalise(cam):
    cam = np.maximum(cam, 0.0)
    top = cam.max()
    return cam / top if top > 0 else cam


def grad_cam(net, image, class_index=1, mask=None):
    """Heatmap of the evidence for ``class_index`` over the last feature map.

    ``net`` must expose ``forward_features`` (input -> N x C x h x w) and
    ``forward_head`` (feature map -> logits). ``image`` is either a
    preprocessed uint8 grayscale array (optionally with a lung ``mask``) or
    a ready 3 x H x W float input. Channel weights are the spatial means of
    the class-score gradient; the map is ``relu(sum_k w_k F_k)`` scaled to a
    maximum of 1 and bilinearly resized to the input size.
    """
    if not (hasattr(net, "forward_features") and hasattr(net, "forward_head")):
        raise ContractError("network must split into forward_features / forward_head")
    image = np.asarray(image)
    if image.dtype == np.uint8 and image.ndim == 2:
        from .classifier import to_input
        x = to_input([image], masks=None if mask is None else [mask])
    elif image.ndim == 3:
        x = image[None].astype(np.float64)
    else:
        raise DimensionError(f"expected H x W uint8 or 3 x H x W float input, got {image.shape}")
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    try:
        fmap = Tensor(np.array(net.forward_features(Tensor(x)).data), requires_grad=True)
        logits = net.forward_head(fmap)
        if not 0 <= class_index < logits.shape[1]:
            raise ConfigError(f"class index {class_index} out of range for {logits.shape[1]} classes")
        logits[0, class_index].backward()
    finally:
        if hasattr(net, "train"):
            net.train(was_training)
    grads = fmap.grad[0]
    weights = grads.mean(axis=(1, 2))
    grid = _normalise(np.tensordot(weights, fmap.data[0], axes=1))
    h, w = x.shape[2:]
    up = imgproc._resize_float(grid, h, w) if grid.shape != (h, w) else grid.copy()
    return Heatmap(grid=grid, upsampled=np.clip(up, 0.0, 1.0), target_class=int(class_index))


def colormap(values):
    """Map values in [0, 1] through the 5-stop colormap to float RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * (len(COLORMAP_STOPS) - 1)
    lo = np.minimum(np.floor(v).astype(int), len(COLORMAP_STOPS) - 2)
    frac = (v - lo)[..., None]
    return COLORMAP_STOPS[lo] * (1.0 - frac) + COLORMAP_STOPS[lo + 1] * frac


def overlay(image, hm, alpha=0.4):
    """Blend the colormapped heatmap over a grayscale image -> uint8 H x W x 3."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    gray = imgproc.to_3channel(image).astype(np.float64)
    heat = hm.upsampled if isinstance(hm, Heatmap) else np.asarray(hm, dtype=np.float64)
    if heat.shape != gray.shape[:2]:
        raise DimensionError(f"heatmap {heat.shape} does not match image {gray.shape[:2]}")
    if alpha == 0.0:
        return gray.astype(np.uint8)
    return imgproc._to_u8((1.0 - alpha) * gray + alpha * colormap(heat))


def save_overlay(path, image, hm, alpha=0.4):
    imgproc.write_pnm(Path(path), overlay(image, hm, alpha))


def peak_in_boxes(hm, boxes):
    """True when the heatmap maximum lies inside any of the boxes."""
    r, c = hm.peak
    return any(b.contains(r, c) for b in boxes)
