"""Datasets: IDX files and a deterministic synthetic blob generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes, split or self.split)


def _read_header(raw: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < 4:
        raise ParseError(f"{what} file too short for magic number", 0)
    (m,) = struct.unpack_from(">I", raw, 0)
    if m != magic:
        raise ParseError(f"{what} file has magic 0x{m:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < need:
        raise ParseError(f"{what} file truncated inside dimension header", len(raw))
    return struct.unpack_from(f">{ndim}I", raw, 4)


def parse_idx_images(raw: bytes) -> np.ndarray:
    n, rows, cols = _read_header(raw, IDX_IMAGES, 3, "image")
    body = n * rows * cols
    if len(raw) < 16 + body:
        raise ParseError(f"image file truncated: {len(raw) - 16} of {body} pixel bytes present", len(raw))
    if len(raw) > 16 + body:
        raise ParseError("image file has trailing bytes", 16 + body)
    return np.frombuffer(raw, np.uint8, body, 16).reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (n,) = _read_header(raw, IDX_LABELS, 1, "label")
    if len(raw) < 8 + n:
        raise ParseError(f"label file truncated: {len(raw) - 8} of {n} label bytes present", len(raw))
    if len(raw) > 8 + n:
        raise ParseError("label file has trailing bytes", 8 + n)
    return np.frombuffer(raw, np.uint8, n, 8)


def load_idx(images_path, labels_path, classes: int | None = None, split: str = "train") -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled by 1/255."""
    pix = parse_idx_images(Path(images_path).read_bytes())
    lab = parse_idx_labels(Path(labels_path).read_bytes())
    if pix.shape[0] != lab.shape[0]:
        raise ParseError(f"image count {pix.shape[0]} does not match label count {lab.shape[0]}", 4)
    images = pix[:, None, :, :].astype(np.float64) / 255.0
    labels = lab.astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, classes, split)


def encode_idx_images(pixels) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, r, c = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES, n, r, c) + pixels.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS, labels.size) + labels.tobytes()


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian blobs on a dark background.

    Class ``c`` puts a blob of width ``blob_sigma * image_size`` centred on a
    circle of radius ``radius * image_size`` at angle ``2 pi c / classes``.
    Each sample jitters the centre, scales the amplitude, and adds pixel noise.
    """

    classes: int = 4
    samples_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 16
    radius: float = 0.22
    blob_sigma: float = 0.13
    jitter: float = 0.09
    amplitude: tuple[float, float] = (0.5, 1.0)
    noise: float = 0.35
    distractor: float = 0.5
    seed: int = 0


def _blobs(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = labels.size
    size = spec.image_size
    grid = np.arange(size) + 0.5
    ang = 2 * np.pi * labels / spec.classes
    cy = size / 2 + spec.radius * size * np.sin(ang) + rng.normal(0, spec.jitter * size, n)
    cx = size / 2 + spec.radius * size * np.cos(ang) + rng.normal(0, spec.jitter * size, n)
    amp = rng.uniform(*spec.amplitude, n)
    sig = spec.blob_sigma * size
    img = amp[:, None, None] * np.exp(-((grid[None, :, None] - cy[:, None, None]) ** 2
                                        + (grid[None, None, :] - cx[:, None, None]) ** 2) / (2 * sig ** 2))
    if spec.distractor > 0:
        # a weaker blob at a uniformly random position, uninformative about the class
        dy = rng.uniform(0, size, n)
        dx = rng.uniform(0, size, n)
        da = spec.distractor * rng.uniform(0, 1, n)
        img += da[:, None, None] * np.exp(-((grid[None, :, None] - dy[:, None, None]) ** 2
                                            + (grid[None, None, :] - dx[:, None, None]) ** 2) / (2 * sig ** 2))
    if spec.noise > 0:
        img += rng.normal(0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)[:, None, :, :]


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Disjoint (train, test) datasets; a pure function of ``spec``."""
    if spec.classes < 1:
        raise ConfigError("synthetic dataset needs at least one class")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    n_tr, n_te = spec.samples_per_class, spec.test_per_class
    labels = np.concatenate([np.repeat(np.arange(spec.classes), n_tr), np.repeat(np.arange(spec.classes), n_te)])
    split = np.concatenate([np.zeros(n_tr * spec.classes, bool), np.ones(n_te * spec.classes, bool)])
    perm = rng.permutation(labels.size)
    labels, split = labels[perm], split[perm]
    images = _blobs(spec, labels, rng)
    train = Dataset(images[~split], labels[~split].astype(np.int64), spec.classes, "train")
    test = Dataset(images[split], labels[split].astype(np.int64), spec.classes, "test")
    return train, test


def holdout_split(ds: Dataset, fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Deterministic train/test split of a single labelled set."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD1CE]))
    perm = rng.permutation(len(ds))
    n_test = int(round(fraction * len(ds)))
    return ds.subset(np.sort(perm[n_test:]), "train"), ds.subset(np.sort(perm[:n_test]), "test")
