"""Samples, synthetic lung phantoms, dataset scanning and split policy."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import DataError, EmptyDatasetError, QuotaError
from .imgproc import read_image

log = logging.getLogger(__name__)

NEGATIVE, POSITIVE = 0, 1
REAL, GENERATED = "real", "generated"


class Box(NamedTuple):
    """Half-open pixel rectangle ``[y0, y1) x [x0, x1)``."""

    y0: int
    x0: int
    y1: int
    x1: int

    def contains(self, y, x):
        return self.y0 <= y < self.y1 and self.x0 <= x < self.x1

    def scaled(self, factor):
        return Box(int(math.floor(self.y0 * factor)), int(math.floor(self.x0 * factor)),
                   int(math.ceil(self.y1 * factor)), int(math.ceil(self.x1 * factor)))


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: int
    origin: str = REAL
    mask: Optional[np.ndarray] = None
    lesion_boxes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (NEGATIVE, POSITIVE):
            raise DataError(f"{self.id}: label must be 0 or 1, got {self.label!r}")
        if self.origin not in (REAL, GENERATED):
            raise DataError(f"{self.id}: origin must be 'real' or 'generated'")
        if self.mask is not None:
            if self.mask.shape != self.image.shape[:2]:
                raise DataError(f"{self.id}: mask {self.mask.shape} != image {self.image.shape[:2]}")
            if not np.isin(self.mask, (0, 255)).all():
                raise DataError(f"{self.id}: mask must be strictly binary {{0, 255}}")


# -- phantoms ---------------------------------------------------------------

def ellipse_mask(shape, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def make_phantom(seed, tb_positive, size=128, origin=REAL):
    """Render a synthetic frontal chest radiograph with exact ground truth.

    Two bright elliptical lung fields sit on a darker thorax with
    sinusoidal rib banding and Gaussian texture noise. Positive phantoms get
    one to three bright blobs in the upper third of a lung field; their
    bounding boxes (two blob sigmas each way) are returned in
    ``lesion_boxes``.
    """
    if size < 32:
        raise DataError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng([int(seed), int(bool(tb_positive)), int(size)])
    s = float(size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    background = rng.uniform(45, 75)
    img = background + rng.uniform(-10, 10) * (yy / s - 0.5)
    lungs = []
    for side in (-1, 1):
        cy = s * rng.uniform(0.46, 0.54)
        cx = s * (0.5 + side * rng.uniform(0.19, 0.24))
        ry = s * rng.uniform(0.26, 0.34)
        rx = s * rng.uniform(0.12, 0.16)
        lungs.append((cy, cx, ry, rx))
    mask = np.zeros((size, size), bool)
    for cy, cx, ry, rx in lungs:
        mask |= ellipse_mask((size, size), cy, cx, ry, rx)
    img = img + mask * rng.uniform(55, 80)

    period = s * rng.uniform(0.09, 0.13)
    ribs = rng.uniform(6, 12) * np.sin(2 * np.pi * yy / period + rng.uniform(0, 2 * np.pi))
    img = img + ribs * np.where(mask, 1.0, 0.5)

    boxes = []
    if tb_positive:
        for _ in range(int(rng.integers(1, 4))):
            cy, cx, ry, rx = lungs[int(rng.integers(2))]
            top = cy - ry
            by = rng.uniform(top + 0.2 * ry, top + 2 * ry / 3)
            half_w = rx * math.sqrt(max(1 - ((by - cy) / ry) ** 2, 0.0))
            bx = rng.uniform(cx - 0.6 * half_w, cx + 0.6 * half_w)
            sigma = s * rng.uniform(0.025, 0.035)
            img = img + rng.uniform(70, 95) * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
            r = 2 * sigma
            boxes.append(Box(max(0, int(math.floor(by - r))), max(0, int(math.floor(bx - r))),
                             min(size, int(math.ceil(by + r))), min(size, int(math.ceil(bx + r)))))

    img = img + rng.normal(0, 5.0, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(
        id=f"phantom-{'p' if tb_positive else 'n'}{int(seed)}",
        image=image,
        label=POSITIVE if tb_positive else NEGATIVE,
        origin=origin,
        mask=mask.astype(np.uint8) * 255,
        lesion_boxes=boxes,
        meta={"lungs": lungs, "seed": int(seed)},
    )


def make_phantom_set(n, seed, size=128, positive_fraction=0.5):
    """``n`` phantoms with a fixed positive fraction, shuffled deterministically."""
    rng = np.random.default_rng(seed)
    n_pos = int(round(n * positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    seeds = rng.choice(2**31 - 1, size=n, replace=False)
    return [make_phantom(int(s), bool(l), size) for s, l in zip(seeds, labels)]


# -- real dataset ingestion --------------------------------------------------

def _label_from_stem(stem):
    tail = stem.rsplit("_", 1)[-1]
    if tail == "1":
        return POSITIVE
    if tail == "0":
        return NEGATIVE
    raise DataError(f"cannot infer label from file name {stem!r} (expected ..._0 or ..._1)")


def _binary(mask):
    if mask.ndim == 3:
        mask = mask.max(axis=2)
    return np.where(mask > 127, 255, 0).astype(np.uint8)


def _image_dir(root):
    sub = root / "CXR_png"
    return sub if sub.is_dir() else root


def scan_dataset(root, layout="shenzhen", warnings=None):
    """Load a dataset directory into :class:`Sample` objects.

    Layouts
    -------
    shenzhen
        ``CXR_png/<stem>.png`` (or images directly in ``root``) with masks in
        ``mask/<stem>.png`` or ``mask/<stem>_mask.png``.
    montgomery
        ``CXR_png/<stem>.png`` with ``ManualMask/leftMask`` and
        ``ManualMask/rightMask`` halves, merged.
    flat
        ``index.csv`` with columns ``id,path,mask_path,label,origin``.

    Unreadable files are skipped and described in ``warnings`` (a list the
    caller may pass in); an empty result raises :class:`EmptyDatasetError`.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDatasetError(f"{root} is not a directory")
    warnings = warnings if warnings is not None else []
    samples = []

    def load(path):
        try:
            return read_image(path)
        except Exception as exc:  # noqa: BLE001 -- any decode failure is itemized
            warnings.append(f"{path}: {exc}")
            log.warning("skipping unreadable file %s: %s", path, exc)
            return None

    if layout == "flat":
        index = root / "index.csv"
        if not index.exists():
            raise EmptyDatasetError(f"{index} not found")
        with open(index, newline="") as fh:
            for row in csv.DictReader(fh):
                img = load(root / row["path"])
                if img is None:
                    continue
                mask = None
                if row.get("mask_path"):
                    m = load(root / row["mask_path"])
                    mask = None if m is None else _binary(m)
                samples.append(Sample(row["id"], img, int(row["label"]), row.get("origin") or REAL, mask))
    elif layout in ("shenzhen", "montgomery"):
        for path in sorted(_image_dir(root).glob("*.png")):
            try:
                label = _label_from_stem(path.stem)
            except DataError as exc:
                warnings.append(str(exc))
                continue
            img = load(path)
            if img is None:
                continue
            mask = None
            if layout == "shenzhen":
                for cand in (root / "mask" / f"{path.stem}.png", root / "mask" / f"{path.stem}_mask.png"):
                    if cand.exists():
                        m = load(cand)
                        mask = None if m is None else _binary(m)
                        break
            else:
                halves = [root / "ManualMask" / side / path.name for side in ("leftMask", "rightMask")]
                parts = [load(p) for p in halves if p.exists()]
                parts = [p for p in parts if p is not None]
                if parts:
                    mask = _binary(np.maximum.reduce([_binary(p) for p in parts]))
            if mask is not None and mask.shape != img.shape[:2]:
                warnings.append(f"{path}: mask size {mask.shape} differs from image {img.shape[:2]}")
                mask = None
            samples.append(Sample(path.stem, img, label, REAL, mask))
    else:
        raise DataError(f"unknown layout {layout!r}; expected shenzhen, montgomery or flat")

    if not samples:
        raise EmptyDatasetError(f"no samples found under {root} (layout {layout})")
    return samples


# -- splitting ---------------------------------------------------------------

@dataclass
class SplitManifest:
    seed: int
    train: list
    validation: list
    test: list
    counts: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({"seed": self.seed, "train": self.train, "validation": self.validation,
                           "test": self.test, "counts": self.counts}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["seed"], d["train"], d["validation"], d["test"], d.get("counts", {}))

    def apply(self, samples):
        """Partition ``samples`` by id into (train, validation, test) lists."""
        by_id = {s.id: s for s in samples}
        missing = [i for i in self.train + self.validation + self.test if i not in by_id]
        if missing:
            raise DataError(f"{len(missing)} manifest ids not present, e.g. {missing[:3]}")
        return tuple([by_id[i] for i in ids] for ids in (self.train, self.validation, self.test))


def _largest_remainder(total, weights):
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base


def split(samples, seed, ratios=(0.8, 0.1, 0.1)):
    """Stratified train/validation/test split with a real-only test set.

    Validation and test sizes are ``round(n * ratio)``; training takes the
    rest. Per-class quotas follow the global class balance (largest
    remainder). Remaining splits are filled without origin constraints.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise DataError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    n = len(samples)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    rng = np.random.default_rng(seed)

    classes = (NEGATIVE, POSITIVE)
    by_class = {c: [s for s in samples if s.label == c] for c in classes}
    class_sizes = [len(by_class[c]) for c in classes]
    test_quota = dict(zip(classes, _largest_remainder(n_test, class_sizes)))
    val_quota = dict(zip(classes, _largest_remainder(n_val, class_sizes)))

    test, val, train = [], [], []
    for c in classes:
        pool = sorted(by_class[c], key=lambda s: s.id)
        real = [s for s in pool if s.origin == REAL]
        if len(real) < test_quota[c]:
            raise QuotaError(
                f"test split needs {test_quota[c]} real samples of class {c} but only "
                f"{len(real)} exist (short by {test_quota[c] - len(real)})"
            )
        picked = set(rng.choice(len(real), size=test_quota[c], replace=False).tolist())
        test += [real[i].id for i in sorted(picked)]
        taken = {real[i].id for i in picked}
        rest = [s for s in pool if s.id not in taken]
        order = rng.permutation(len(rest))
        val += [rest[i].id for i in sorted(order[: val_quota[c]])]
        train += [rest[i].id for i in sorted(order[val_quota[c]:])]

    label_of = {s.id: s.label for s in samples}
    counts = {
        name: {"negative": sum(label_of[i] == NEGATIVE for i in part),
               "positive": sum(label_of[i] == POSITIVE for i in part)}
        for name, part in (("train", train), ("validation", val), ("test", test))
    }
    return SplitManifest(int(seed), sorted(train), sorted(val), sorted(test), counts)
