"""Image preprocessing, augmentation and raster I/O.

Images are plain ``uint8`` numpy arrays: ``(H, W)`` for grayscale and
``(H, W, 3)`` for colour. Binary masks use ``{0, 255}``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ChannelError, ConfigError, DimensionError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _gray(img, op):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ChannelError(f"{op} expects a single-channel image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise TypeError(f"{op} expects uint8 pixels, got {img.dtype}")
    return img


def _to_u8(values):
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def _equalization_lut(hist):
    """Map each grey level through the normalised CDF of ``hist``.

    Levels below the first populated bin map to 0; a single-level histogram
    yields the identity (there is nothing to spread).
    """
    cdf = np.cumsum(hist, dtype=np.float64)
    total = cdf[-1]
    nonzero = np.flatnonzero(hist > 0)
    cdf_min = cdf[nonzero[0]]
    if total - cdf_min <= 0:
        return np.arange(256, dtype=np.float64)
    return np.clip((cdf - cdf_min) / (total - cdf_min), 0.0, 1.0) * 255.0


def hist_equalize(img):
    """Global histogram equalization."""
    img = _gray(img, "hist_equalize")
    hist = np.bincount(img.ravel(), minlength=256)
    return _to_u8(_equalization_lut(hist))[img]


def _tile_edges(n, tile):
    edges = list(range(0, n, tile)) + [n]
    return np.array(edges)


def _clip_histogram(hist, ceiling):
    """Clip at ``ceiling`` and spread the excess evenly, never pushing a bin
    back over the ceiling (closed-form water filling, one pass)."""
    clipped = np.minimum(hist, ceiling)
    excess = hist.sum() - clipped.sum()
    if excess <= 0:
        return clipped
    room = np.sort(ceiling - clipped)
    filled_before = np.concatenate(([0.0], np.cumsum(room)[:-1]))
    open_bins = 256 - np.arange(256)
    level = (excess - filled_before) / open_bins
    k = int(np.argmax(level <= room)) if np.any(level <= room) else 255
    return clipped + np.minimum(level[k], ceiling - clipped)


def clahe(img, tile=None, clip_limit=2.0):
    """Contrast-limited adaptive histogram equalization.

    Parameters
    ----------
    img : ndarray
        Grayscale uint8 image.
    tile : int, optional
        Tile edge length in pixels. Edge tiles may be smaller. Defaults to an
        8x8 grid, i.e. ``ceil(max(H, W) / 8)``.
    clip_limit : float
        Histogram ceiling as a multiple of the uniform bin height
        (``pixels_in_tile / 256``). ``inf`` disables clipping.

    Notes
    -----
    Excess counts above the ceiling are redistributed uniformly in a single
    pass; bins that reach the ceiling stop receiving, so a clip limit of 1.0
    flattens every tile histogram exactly. Per-tile lookup tables are blended bilinearly
    between tile centres.
    """
    img = _gray(img, "clahe")
    h, w = img.shape
    if tile is None:
        tile = max(2, math.ceil(max(h, w) / 8))
    if tile < 2:
        raise ConfigError(f"CLAHE tile must be >= 2 pixels, got {tile}")
    if not clip_limit >= 1.0:
        raise ConfigError(f"CLAHE clip_limit must be >= 1.0, got {clip_limit}")

    ys, xs = _tile_edges(h, tile), _tile_edges(w, tile)
    ny, nx = len(ys) - 1, len(xs) - 1
    luts = np.empty((ny, nx, 256))
    for i in range(ny):
        for j in range(nx):
            block = img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            hist = np.bincount(block.ravel(), minlength=256).astype(np.float64)
            if np.isfinite(clip_limit):
                hist = _clip_histogram(hist, clip_limit * block.size / 256.0)
            luts[i, j] = _equalization_lut(hist)

    def axis_weights(edges, n):
        centres = (edges[:-1] + edges[1:]) / 2.0
        pos = np.arange(n) + 0.5
        if len(centres) == 1:
            zeros = np.zeros(n, dtype=int)
            return zeros, zeros, np.zeros(n)
        hi = np.clip(np.searchsorted(centres, pos, side="right"), 1, len(centres) - 1)
        lo = hi - 1
        frac = np.clip((pos - centres[lo]) / (centres[hi] - centres[lo]), 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_weights(ys, h)
    x0, x1, fx = axis_weights(xs, w)
    fy, fx = fy[:, None], fx[None, :]
    v = img
    top = (1 - fx) * luts[y0[:, None], x0[None, :], v] + fx * luts[y0[:, None], x1[None, :], v]
    bottom = (1 - fx) * luts[y1[:, None], x0[None, :], v] + fx * luts[y1[:, None], x1[None, :], v]
    return _to_u8((1 - fy) * top + fy * bottom)


def median3x3(img):
    """3x3 median filter with edge replication."""
    img = _gray(img, "median3x3")
    return ndimage.median_filter(img, size=3, mode="nearest")


def _resize_float(arr, out_h, out_w):
    """Bilinear resize of a 2-D float array with half-pixel-centred sampling."""
    h, w = arr.shape
    ry = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    rx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ry).astype(int)
    x0 = np.floor(rx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ry - y0)[:, None]
    wx = (rx - x0)[None, :]
    a = arr.astype(np.float64)
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bottom = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_bilinear(img, out_w, out_h):
    img = np.asarray(img)
    if out_w < 1 or out_h < 1:
        raise ConfigError("output size must be at least 1x1")
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    if img.ndim == 2:
        return _to_u8(_resize_float(img, out_h, out_w))
    return np.stack([_to_u8(_resize_float(img[..., c], out_h, out_w)) for c in range(img.shape[2])], axis=-1)


def resize_nearest(img, out_w, out_h):
    """Nearest-neighbour resize (used for binary masks)."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return img[rows][:, cols]


def to_3channel(img):
    img = _gray(img, "to_3channel")
    return np.repeat(img[:, :, None], 3, axis=2)


def normalize(img, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """uint8 H x W x 3 -> float64 3 x H x W, ``(pixel/255 - mean_c) / std_c``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelError(f"normalize expects an H x W x 3 image, got {img.shape}")
    mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    if np.any(std <= 0):
        raise ConfigError("normalization std components must be positive")
    chw = img.transpose(2, 0, 1).astype(np.float64) / 255.0
    return (chw - mean) / std


def preprocess_u8(img, size=128, clahe_tile=None, clip_limit=2.0):
    """grayscale -> CLAHE -> 3x3 median -> bilinear resize; stays uint8."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = _to_u8(img.astype(np.float64).mean(axis=2))
    out = median3x3(clahe(img, clahe_tile, clip_limit))
    return resize_bilinear(out, size, size)


def preprocess(img, size=128, clahe_tile=None, clip_limit=2.0, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Full classifier input chain, returning a normalised 3 x size x size array."""
    return normalize(to_3channel(preprocess_u8(img, size, clahe_tile, clip_limit)), mean, std)


# -- augmentation -----------------------------------------------------------

@dataclass
class AugmentSpec:
    """Ranges for each random transform; a zero range disables it.

    ``rotation`` and ``shear`` are (low, high) degree ranges; ``translation``
    is the maximum shift as a fraction of the image side.
    """

    rotation: tuple = (0.0, 0.0)
    translation: float = 0.0
    shear: tuple = (0.0, 0.0)
    hflip: float = 0.0
    grid_cells: int = 0
    grid_magnitude: float = 0.0
    elastic_alpha: float = 0.0
    elastic_sigma: float = 4.0
    cutout_count: int = 0
    cutout_size: int = 0
    blur_sigma: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.rotation = tuple(float(v) for v in self.rotation)
        self.shear = tuple(float(v) for v in self.shear)
        self.blur_sigma = tuple(float(v) for v in self.blur_sigma)
        for name in ("rotation", "shear", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"{name} must be a finite (low, high) range, got {(lo, hi)}")
        if self.blur_sigma[0] < 0:
            raise ConfigError("blur_sigma must be non-negative")
        for name in ("translation", "grid_magnitude", "elastic_alpha", "elastic_sigma",
                     "grid_cells", "cutout_count", "cutout_size"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if not 0.0 <= self.hflip <= 1.0:
            raise ConfigError(f"hflip probability must be in [0, 1], got {self.hflip}")

    def with_seed(self, seed):
        d = asdict(self)
        d["seed"] = seed
        return AugmentSpec(**d)

    @property
    def is_identity(self):
        return (self.rotation == (0.0, 0.0) and self.translation == 0 and self.shear == (0.0, 0.0)
                and self.hflip == 0 and (self.grid_cells == 0 or self.grid_magnitude == 0)
                and self.elastic_alpha == 0 and (self.cutout_count == 0 or self.cutout_size == 0)
                and self.blur_sigma[1] == 0)


def _sampling_grid(shape, spec, rng):
    """Source coordinates (rows, cols) for every destination pixel."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dr, dc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    if rng.random() < spec.hflip:
        dc = -dc
    theta = math.radians(rng.uniform(*spec.rotation)) if spec.rotation != (0.0, 0.0) else 0.0
    shear = math.tan(math.radians(rng.uniform(*spec.shear))) if spec.shear != (0.0, 0.0) else 0.0
    ty, tx = (rng.uniform(-spec.translation, spec.translation, size=2) * (h, w)
              if spec.translation else (0.0, 0.0))
    cos, sin = math.cos(theta), math.sin(theta)
    src_r = cy + cos * dr + sin * dc - ty
    src_c = cx - sin * dr + cos * dc + shear * dr - tx

    if spec.grid_cells and spec.grid_magnitude:
        n = spec.grid_cells
        for coords, size in ((src_r, h), (src_c, w)):
            ctrl = rng.uniform(-spec.grid_magnitude, spec.grid_magnitude, size=(n + 1, n + 1)) * (size / n)
            coords += ndimage.zoom(ctrl, (h / (n + 1), w / (n + 1)), order=1, mode="nearest")[:h, :w]
    if spec.elastic_alpha:
        for coords in (src_r, src_c):
            noise = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), spec.elastic_sigma)
            coords += spec.elastic_alpha * noise
    return src_r, src_c


def augment(img, mask=None, spec=None):
    """Apply one random draw of ``spec`` to an image and, identically, its mask.

    The image is resampled bilinearly, the mask by nearest neighbour. Cutout
    and blur touch the image only.
    """
    img = np.asarray(img)
    if mask is not None and np.asarray(mask).shape[:2] != img.shape[:2]:
        raise DimensionError(f"mask {np.shape(mask)} does not match image {img.shape}")
    spec = spec or AugmentSpec()
    if spec.is_identity:
        return img.copy(), (None if mask is None else np.asarray(mask).copy())
    rng = np.random.default_rng(spec.seed)
    src_r, src_c = _sampling_grid(img.shape[:2], spec, rng)

    def warp(a, order):
        a = a.astype(np.float64)
        if a.ndim == 2:
            return ndimage.map_coordinates(a, [src_r, src_c], order=order, mode="nearest")
        return np.stack([ndimage.map_coordinates(a[..., c], [src_r, src_c], order=order, mode="nearest")
                         for c in range(a.shape[2])], axis=-1)

    out = warp(img, 1)
    out_mask = None if mask is None else _to_u8(warp(np.asarray(mask), 0))
    h, w = img.shape[:2]
    for _ in range(spec.cutout_count if spec.cutout_size else 0):
        y, x = rng.integers(0, h), rng.integers(0, w)
        s = spec.cutout_size // 2
        out[max(0, y - s):y - s + spec.cutout_size, max(0, x - s):x - s + spec.cutout_size] = 0
    if spec.blur_sigma[1] > 0:
        sigma = rng.uniform(*spec.blur_sigma)
        if out.ndim == 2:
            out = ndimage.gaussian_filter(out, sigma)
        else:
            out = ndimage.gaussian_filter(out, (sigma, sigma, 0))
    return _to_u8(out), out_mask


# -- raster I/O --------------------------------------------------------------

def write_pnm(path, img):
    """Write a binary PGM (P5) or PPM (P6) depending on channel count."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ChannelError(f"cannot write image of shape {img.shape} as PNM")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only 8-bit P5/P6 files are supported")
    channels = 1 if magic == b"P5" else 3
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    return pixels.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def read_image(path):
    """Read PGM/PPM natively, anything else (PNG) through Pillow."""
    path = str(path)
    if path.lower().endswith((".pgm", ".ppm", ".pnm")):
        return read_pnm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(im, dtype=np.uint8).copy()
