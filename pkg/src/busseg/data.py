"""Dataset ingestion, preprocessing, augmentation, splitting and phantoms.

On-disk layout: `<dir>/images/<id>.png`, `<dir>/masks/<id>.png` (8-bit
grayscale; masks binarized at nonzero) plus `<dir>/manifest.csv` with
`id,label` rows.  The synthetic phantom generator writes the same layout,
pairing smooth macrolobulated "benign" blobs with spiculated "malignant"
stars on a speckled background so the full pipeline can be exercised
without clinical data.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import RngStream

TARGET_SIZE = 96
LABELS = ("benign", "malignant", "unknown")


class DataError(ValueError):
    """Unusable input data (missing files, malformed manifests, bad masks)."""


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float32 in [0,1], H x W
    mask: np.ndarray   # uint8 in {0,1}, same extents
    label: str = "unknown"


@dataclass
class SplitSpec:
    train: float = 0.70
    val: float = 0.10
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class AugmentPlan:
    scales: tuple = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
    gammas: tuple = (0.5, 1.0, 1.5, 2.0, 2.5)
    flips: tuple = ("horizontal", "vertical")
    rotations: tuple = (90, 180, 270)


# -- raster I/O ---------------------------------------------------------------


def read_gray(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def write_gray(path, values):
    """Write a uint8 grayscale PNG; float arrays in [0,1] are rescaled."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def read_manifest(path):
    labels = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip() == "id":
                continue
            if len(row) < 2:
                raise DataError(f"manifest row {row!r} in {path} needs id,label")
            labels[row[0].strip()] = row[1].strip()
    return labels


def write_manifest(path, samples):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for s in samples:
            writer.writerow([s.id, s.label])


def load_dataset(root, manifest=None):
    """Read `<root>/images` + `<root>/masks` (+ manifest) into Samples, id-sorted."""
    root = Path(root)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir():
        raise DataError(f"missing images directory {image_dir}")
    manifest_path = Path(manifest) if manifest else root / "manifest.csv"
    labels = read_manifest(manifest_path) if manifest_path.exists() else {}
    stems = sorted(p.stem for p in image_dir.glob("*.png"))
    if not stems:
        raise DataError(f"no .png images under {image_dir}")
    missing = [s for s in stems if not (mask_dir / f"{s}.png").exists()]
    if missing:
        raise DataError(f"missing mask files for: {', '.join(missing)}")
    samples = []
    for stem in stems:
        image = read_gray(image_dir / f"{stem}.png").astype(np.float32) / 255.0
        mask = (read_gray(mask_dir / f"{stem}.png") > 0).astype(np.uint8)
        if image.shape != mask.shape:
            raise DataError(f"sample {stem}: image {image.shape} vs mask {mask.shape}")
        samples.append(Sample(stem, image, mask, labels.get(stem, "unknown")))
    return samples


def save_dataset(samples, root):
    root = Path(root)
    for s in samples:
        write_gray(root / "images" / f"{s.id}.png", s.image)
        write_gray(root / "masks" / f"{s.id}.png", s.mask * 255)
    write_manifest(root / "manifest.csv", samples)


# -- resampling ---------------------------------------------------------------


def resize_bilinear(img, out_h, out_w):
    """Half-pixel-center bilinear resampling (edge-clamped)."""
    in_h, in_w = img.shape
    sy = in_h / out_h
    sx = in_w / out_w
    yy = (np.arange(out_h) + 0.5) * sy - 0.5
    xx = (np.arange(out_w) + 0.5) * sx - 0.5
    y0 = np.clip(np.floor(yy), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(xx), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = np.clip(yy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xx - x0, 0.0, 1.0)[None, :]
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def resize_nearest(img, out_h, out_w):
    in_h, in_w = img.shape
    yy = np.clip(np.floor((np.arange(out_h) + 0.5) * in_h / out_h), 0, in_h - 1).astype(int)
    xx = np.clip(np.floor((np.arange(out_w) + 0.5) * in_w / out_w), 0, in_w - 1).astype(int)
    return img[np.ix_(yy, xx)]


def preprocess(sample):
    """Resample to 96x96 (bilinear image, nearest mask) with values in [0,1]."""
    image = np.clip(resize_bilinear(sample.image, TARGET_SIZE, TARGET_SIZE), 0.0, 1.0)
    mask = resize_nearest(sample.mask, TARGET_SIZE, TARGET_SIZE).astype(np.uint8)
    return Sample(sample.id, image.astype(np.float32), mask, sample.label)


# -- augmentation -------------------------------------------------------------


def _recanvas(img, mask, size):
    """Center-crop or zero-pad a resized pair back to size x size."""
    h, w = img.shape
    if h >= size:
        top = (h - size) // 2
        img = img[top:top + size]
        mask = mask[top:top + size]
    else:
        pad_top = (size - h) // 2
        img = np.pad(img, ((pad_top, size - h - pad_top), (0, 0)))
        mask = np.pad(mask, ((pad_top, size - h - pad_top), (0, 0)))
    if w >= size:
        left = (w - size) // 2
        img = img[:, left:left + size]
        mask = mask[:, left:left + size]
    else:
        pad_left = (size - w) // 2
        img = np.pad(img, ((0, 0), (pad_left, size - w - pad_left)))
        mask = np.pad(mask, ((0, 0), (pad_left, size - w - pad_left)))
    return img, mask


def augment(sample, plan=None):
    """One variant per scale, gamma, flip and rotation in the plan.

    Geometric transforms apply to image and mask alike; gamma correction
    touches the image only.  Output order follows the plan's factor lists.
    """
    plan = plan or AugmentPlan()
    size = sample.image.shape[0]
    out = []
    for f in plan.scales:
        new = max(1, int(round(size * f)))
        img = resize_bilinear(sample.image, new, new)
        mask = resize_nearest(sample.mask, new, new)
        img, mask = _recanvas(img, mask, size)
        out.append(Sample(f"{sample.id}_s{f:g}", img.astype(np.float32),
                          mask.astype(np.uint8), sample.label))
    for g in plan.gammas:
        img = np.power(sample.image, g, dtype=np.float64).astype(np.float32)
        out.append(Sample(f"{sample.id}_g{g:g}", img, sample.mask.copy(), sample.label))
    for fl in plan.flips:
        axis = 1 if fl == "horizontal" else 0
        out.append(Sample(f"{sample.id}_f{fl[0]}",
                          np.flip(sample.image, axis).copy(),
                          np.flip(sample.mask, axis).copy(), sample.label))
    for deg in plan.rotations:
        k = deg // 90
        out.append(Sample(f"{sample.id}_r{deg}",
                          np.rot90(sample.image, k).copy(),
                          np.rot90(sample.mask, k).copy(), sample.label))
    return out


# -- splitting ----------------------------------------------------------------


def split(samples, spec=None):
    """Stratified, seeded 70/10/20 split; train absorbs rounding remainders."""
    spec = spec or SplitSpec()
    if len(samples) < 10:
        raise DataError(f"need at least 10 samples to split, got {len(samples)}")
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda s: s.id)
        if len(group) < 3:
            warnings.warn(f"label {label!r} has only {len(group)} samples; "
                          "stratification is degenerate")
        order = rng.permutation(len(group))
        n = len(group)
        n_val = int(round(n * spec.val))
        n_test = int(round(n * spec.test))
        shuffled = [group[i] for i in order]
        val.extend(shuffled[:n_val])
        test.extend(shuffled[n_val:n_val + n_test])
        train.extend(shuffled[n_val + n_test:])
    key = lambda s: s.id
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


# -- synthetic phantoms --------------------------------------------------------


def _polygon_mask(vertices, size):
    """Even-odd rasterization: pixel centers inside the closed polygon."""
    ys, xs = np.mgrid[0:size, 0:size]
    ys = ys.astype(np.float64).ravel()
    xs = xs.astype(np.float64).ravel()
    inside = np.zeros(ys.shape, dtype=bool)
    v = np.asarray(vertices)
    n = len(v)
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        crosses = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= crosses & (xs < xi)
    return inside.reshape(size, size).astype(np.uint8)


def _phantom_outline(rng, malignant, size):
    cx = size / 2 + rng.uniform(()).item() * 10 - 5 + 0.31
    cy = size / 2 + rng.uniform(()).item() * 10 - 5 + 0.53
    base = 14.0 + rng.uniform(()).item() * 12.0
    phase = rng.uniform(()).item() * 2 * np.pi
    theta = np.linspace(0.0, 2 * np.pi, 720, endpoint=False) + 1e-4
    if malignant:
        spikes = int(7 + rng.integers(0, 6))
        depth = 0.35 + rng.uniform(()).item() * 0.3
        sharp = np.abs(np.sin(spikes * theta / 2.0 + phase)) ** 0.35
        r = base * (1.0 - depth + 1.5 * depth * sharp)
    else:
        lobes = int(2 + rng.integers(0, 3))
        amp = 0.05 + rng.uniform(()).item() * 0.12
        r = base * (1.0 + amp * np.cos(lobes * theta + phase))
    xs = cx + r * np.cos(theta)
    ys = cy + r * np.sin(theta)
    return np.stack([xs, ys], axis=1)


def synth_phantoms(n, seed=0, size=TARGET_SIZE):
    """Balanced benign/malignant phantom corpus, bitwise determined by seed."""
    if n < 2:
        raise ValueError("need at least 2 phantoms")
    samples = []
    for idx in range(n):
        malignant = idx % 2 == 1
        rng = RngStream(seed, stream=idx + 1)
        outline = _phantom_outline(rng, malignant, size)
        mask = _polygon_mask(outline, size)
        tumor_level = 0.12 + rng.uniform(()).item() * 0.18
        bg_level = 0.55 + rng.uniform(()).item() * 0.2
        speckle = 1.0 + 0.25 * rng.normal((size, size), dtype=np.float64)
        base = np.where(mask > 0, tumor_level, bg_level)
        image = np.clip(base * speckle, 0.0, 1.0).astype(np.float32)
        label = "malignant" if malignant else "benign"
        samples.append(Sample(f"p{idx:03d}", image, mask, label))
    return samples
