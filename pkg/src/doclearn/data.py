"""Datasets, splits, batch streams and the synthetic shape generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from . import container

DATASET_MAGIC = b"DOCDATA\0"
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm", ".bmp")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``(N, c, h, w)`` in [0, 1] with dense integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    source: str = ""
    ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, c, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("labels must be dense in [0, C)")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, source: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), source or self.source, self.ids[idx])

    def select_classes(self, names: Sequence[str], source: str | None = None) -> "Dataset":
        """Keep only ``names`` (in the given order), re-densifying labels."""
        missing = [n for n in names if n not in self.class_names]
        if missing:
            raise DatasetError(f"unknown classes {missing}")
        old = [self.class_names.index(n) for n in names]
        mask = np.isin(self.labels, old)
        remap = np.full(self.num_classes, -1, dtype=np.int64)
        remap[old] = np.arange(len(old))
        return Dataset(
            self.images[mask],
            remap[self.labels[mask]],
            list(names),
            source or f"{self.source}|classes={','.join(names)}",
            self.ids[mask],
        )

    def of_class(self, name: str) -> "Dataset":
        return self.select_classes([name])


def save_dataset(ds: Dataset, path) -> None:
    header = {"class_names": ds.class_names, "source": ds.source}
    container.write(path, DATASET_MAGIC, header, {"images": ds.images, "labels": ds.labels, "ids": ds.ids})


def load_dataset(path) -> Dataset:
    header, arrays = container.read(path, DATASET_MAGIC)
    return Dataset(arrays["images"], arrays["labels"], header["class_names"], header["source"], arrays["ids"])


# ---------------------------------------------------------------------------
# image directories


def read_image(path) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB image to a ``(c, h, w)`` array in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise DatasetError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit grayscale or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"{path}: cannot decode image ({exc})") from None
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write a ``(c, h, w)`` array in [0, 1] as an 8-bit image; the suffix picks the format."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DatasetError(f"expected a (1|3, h, w) image, got {img.shape}")
    px = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    Image.fromarray(px[0] if img.shape[0] == 1 else px.transpose(1, 2, 0)).save(path)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a ``(c, h, w)`` image (pixel-centre alignment)."""
    c, h, w = image.shape
    oh, ow = size
    if (oh, ow) == (h, w):
        return image.copy()

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(oh, h)
    x0, x1, fx = coords(ow, w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image_dir(path, size: tuple[int, int] = (28, 28), channels: int = 1) -> Dataset:
    """Load ``path/<class>/<image>`` (PNG, PGM/PPM or BMP); classes and files in sorted order.

    RGB images are converted to luminance when ``channels == 1``; grayscale
    images are replicated when ``channels == 3``.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class subdirectories")
    images, labels, names = [], [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DatasetError(f"{d}: empty class directory")
        names.append(d.name)
        for f in files:
            img = read_image(f)
            if channels == 1 and img.shape[0] == 3:
                img = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
            elif channels == 3 and img.shape[0] == 1:
                img = np.repeat(img, 3, axis=0)
            images.append(resize_bilinear(img, size))
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), names, f"dir:{root.resolve()}")


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("hbar", "vbar", "diag", "antidiag", "ring", "disk", "plus", "cross", "square", "corner")


def _render(kind: str, yy: np.ndarray, xx: np.ndarray, width: float, scale: float) -> np.ndarray:
    """Soft-edged binary shape on centred coordinates (units of half-size)."""
    r = np.hypot(yy, xx)

    def band(d, w):
        return np.clip(1.0 - (np.abs(d) - w) * 4.0, 0.0, 1.0)

    s = 0.6 * scale
    inside = (np.abs(yy) < s + 0.1) & (np.abs(xx) < s + 0.1)
    diag_in = r < s * 1.2
    if kind == "hbar":
        return band(yy, width) * inside
    if kind == "vbar":
        return band(xx, width) * inside
    if kind == "diag":
        return band((yy + xx) / math.sqrt(2), width) * diag_in
    if kind == "antidiag":
        return band((yy - xx) / math.sqrt(2), width) * diag_in
    if kind == "ring":
        return band(r - s, width)
    if kind == "disk":
        return np.clip(1.0 - (r - s) * 4.0, 0.0, 1.0)
    if kind == "plus":
        return np.maximum(band(yy, width), band(xx, width)) * inside
    if kind == "cross":
        return np.maximum(band((yy + xx) / math.sqrt(2), width), band((yy - xx) / math.sqrt(2), width)) * diag_in
    if kind == "square":
        return band(np.maximum(np.abs(yy), np.abs(xx)) - s, width)
    if kind == "corner":
        return np.maximum(band(yy + s, width) * (xx > -s - 0.1) * (xx < s), band(xx + s, width) * (yy > -s - 0.1) * (yy < s))
    raise ValueError(kind)


def synth_shapes(
    classes: int = 10,
    per_class: int = 100,
    image_size: int = 28,
    noise: float = 0.1,
    seed: int = 0,
    jitter: float = 0.0,
) -> Dataset:
    """Procedurally rendered shape classes.

    Class ``i`` draws shape ``SHAPES[i % 10]``; classes beyond ten reuse the
    list at a smaller scale.  Each sample is the class shape with random
    translation, rotation, scale and stroke width (all proportional to
    ``jitter``), a random contrast in ``[1 - jitter/2, 1]``, and additive
    Gaussian pixel noise of standard deviation ``noise``, clipped to [0, 1].
    With ``noise == jitter == 0`` every sample of a class is identical.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    if image_size < 8 or per_class < 1:
        raise DatasetError("image_size must be >= 8 and per_class >= 1")
    if noise < 0 or jitter < 0:
        raise DatasetError("noise and jitter must be non-negative")
    rng = np.random.default_rng(seed)
    grid = (np.arange(image_size) + 0.5) / image_size * 2 - 1
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((classes * per_class, 1, image_size, image_size))
    labels = np.repeat(np.arange(classes), per_class)
    names = []
    for c in range(classes):
        kind = SHAPES[c % len(SHAPES)]
        base_scale = 1.0 / (1 + c // len(SHAPES)) ** 0.5
        names.append(kind if c < len(SHAPES) else f"{kind}{c // len(SHAPES)}")
        for s in range(per_class):
            dy, dx = rng.uniform(-1, 1, 2) * 0.25 * jitter
            theta = rng.uniform(-1, 1) * 0.35 * jitter
            scale = base_scale * (1 + rng.uniform(-1, 1) * 0.2 * jitter)
            width = 0.12 * (1 + rng.uniform(-1, 1) * 0.5 * jitter)
            contrast = 1 - rng.uniform(0, 0.5) * jitter
            cos, sin = math.cos(theta), math.sin(theta)
            yy = cos * (gy - dy) - sin * (gx - dx)
            xx = sin * (gy - dy) + cos * (gx - dx)
            img = contrast * _render(kind, yy, xx, width, scale)
            if noise > 0:
                img = img + rng.normal(0, noise, img.shape)
            images[c * per_class + s, 0] = np.clip(img, 0.0, 1.0)
    source = f"synth_shapes(classes={classes},per_class={per_class},size={image_size},noise={noise},jitter={jitter},seed={seed})"
    return Dataset(images, labels, names, source)


# ---------------------------------------------------------------------------
# splits and streams


def filter_overlap(reference: Dataset, target_classes: Sequence[str]) -> Dataset:
    """Drop reference classes whose names appear among ``target_classes``."""
    keep = [n for n in reference.class_names if n not in set(target_classes)]
    if not keep:
        raise DatasetError("overlap filtering removed every reference class")
    return reference.select_classes(keep, f"{reference.source}|minus={','.join(sorted(target_classes))}")


def split(ds: Dataset, fraction: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class stratified random split into ``(train, test)``."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DatasetError(f"class {ds.class_names[c]!r} has fewer than 2 samples")
        idx = rng.permutation(idx)
        cut = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr, f"{ds.source}|train{fraction}"), ds.subset(te, f"{ds.source}|test{fraction}")


def reference_subset(ds: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Stratified random subset keeping ``fraction`` of each reference class."""
    if fraction >= 1:
        return ds
    sub, _ = split(ds, fraction, seed)
    return sub


class BatchStream:
    """Endless batches, reshuffled every epoch.

    Every epoch is a permutation of the dataset.  A trailing batch smaller
    than ``min_batch`` is dropped (target streams use ``min_batch=2``
    because the compactness loss needs two samples).
    """

    def __init__(self, ds: Dataset, batch_size: int, seed: int = 0, min_batch: int = 1, shuffle: bool = True):
        if len(ds) == 0:
            raise DatasetError("cannot stream an empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(ds) < min_batch:
            raise DatasetError(f"dataset of {len(ds)} samples cannot fill a batch of {min_batch}")
        self.ds = ds
        self.batch_size = min(batch_size, len(ds))
        self.min_batch = min_batch
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)

    @property
    def batches_per_epoch(self) -> int:
        full, rest = divmod(len(self.ds), self.batch_size)
        return full + (1 if rest >= self.min_batch else 0)

    def epoch_indices(self) -> list[np.ndarray]:
        order = self.rng.permutation(len(self.ds)) if self.shuffle else np.arange(len(self.ds))
        chunks = [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        return [c for c in chunks if len(c) >= self.min_batch]

    def indices(self) -> Iterator[np.ndarray]:
        while True:
            yield from self.epoch_indices()

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for idx in self.indices():
            yield self.ds.images[idx], self.ds.labels[idx]
