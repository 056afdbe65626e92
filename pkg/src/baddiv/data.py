"""MNIST IDX ingestion, binarization, augmentation, batching, and a 2-D
Gaussian-mixture harness used to sanity-check the divergence objective."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "IdxFormatError",
    "MnistData",
    "MixtureSpec",
    "load_mnist_idx",
    "read_idx_images",
    "read_idx_labels",
    "write_idx_images",
    "write_idx_labels",
    "binarize",
    "augment",
    "affine_image",
    "blur_image",
    "erase_image",
    "sample_mixture",
    "batches",
    "batch_starts",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class IdxFormatError(ValueError):
    """Raised for malformed IDX files (bad magic, truncation, count mismatch)."""


@dataclass
class MnistData:
    """Images as float32 (n, 1, 28, 28) in [0, 1] with int labels 0-9."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# IDX format (big-endian u32 header words, u8 payload)
# ---------------------------------------------------------------------------

def _read_u32s(buf: bytes, path, n: int, offset: int = 0) -> tuple[int, ...]:
    end = offset + 4 * n
    if len(buf) < end:
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack(f">{n}I", buf[offset:end])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, count, rows, cols = _read_u32s(buf, path, 4)
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic {magic}, expected {IMAGE_MAGIC} for images")
    expected = 16 + count * rows * cols
    if len(buf) != expected:
        raise IdxFormatError(
            f"{path}: truncated file ({len(buf)} bytes, expected {expected})")
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, count = _read_u32s(buf, path, 2)
    if magic != LABEL_MAGIC:
        raise IdxFormatError(
            f"{path}: bad magic {magic}, expected {LABEL_MAGIC} for labels")
    if len(buf) != 8 + count:
        raise IdxFormatError(
            f"{path}: truncated file ({len(buf)} bytes, expected {8 + count})")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path) -> MnistData:
    """Load an images/labels IDX pair; pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image/label count mismatch: {len(images)} images in "
            f"{images_path} vs {len(labels)} labels in {labels_path}")
    scaled = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return MnistData(images=scaled, labels=labels.astype(np.int64))


# ---------------------------------------------------------------------------
# binarization
# ---------------------------------------------------------------------------

def binarize(images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Pixel p -> 1 iff p >= threshold (inclusive)."""
    return (np.asarray(images) >= threshold).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation (classifier training only)
# ---------------------------------------------------------------------------

def affine_image(img: np.ndarray, rng: np.random.Generator,
                 max_rotate_deg: float = 15.0, max_translate: float = 2.0,
                 scale_range: tuple[float, float] = (0.9, 1.1)) -> np.ndarray:
    """Small random rotation/translation/scale around the image center."""
    angle = np.deg2rad(rng.uniform(-max_rotate_deg, max_rotate_deg))
    tx, ty = rng.uniform(-max_translate, max_translate, size=2)
    scale = rng.uniform(*scale_range)
    c, s = np.cos(angle), np.sin(angle)
    # output -> input mapping for ndimage (inverse transform)
    mat = np.array([[c, -s], [s, c]]) / scale
    center = (np.array(img.shape[-2:]) - 1) / 2.0
    offset = center - mat @ (center + np.array([ty, tx]))
    out = ndimage.affine_transform(img[0], mat, offset=offset, order=1,
                                   mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)[None].astype(np.float32)


def blur_image(img: np.ndarray, rng: np.random.Generator,
               sigma_range: tuple[float, float] = (0.1, 1.0)) -> np.ndarray:
    """3x3 Gaussian blur with a randomly drawn sigma."""
    sigma = rng.uniform(*sigma_range)
    ax = np.arange(-1, 2, dtype=np.float64)
    k1 = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel = np.outer(k1, k1)
    kernel /= kernel.sum()
    out = ndimage.convolve(img[0].astype(np.float64), kernel, mode="constant")
    return np.clip(out, 0.0, 1.0)[None].astype(np.float32)


def erase_image(img: np.ndarray, rng: np.random.Generator,
                size_range: tuple[int, int] = (4, 8)) -> np.ndarray:
    """Zero a random square patch of side in [size_range]."""
    h, w = img.shape[-2:]
    size = int(rng.integers(size_range[0], size_range[1] + 1))
    size = min(size, h, w)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    out = img.copy()
    out[..., top:top + size, left:left + size] = 0.0
    return out


_AUGMENTS = (affine_image, blur_image, erase_image)


def augment(batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """With probability 0.5 per image apply exactly one random augmentation.

    Draw order: one uniform per image (apply decision), one integer per image
    (augmentation choice), then the chosen augmentation's own draws image by
    image in batch order.
    """
    batch = np.asarray(batch, dtype=np.float32)
    n = batch.shape[0]
    apply_mask = rng.random(n) < 0.5
    kinds = rng.integers(0, len(_AUGMENTS), size=n)
    out = batch.copy()
    for i in range(n):
        if apply_mask[i]:
            out[i] = _AUGMENTS[kinds[i]](batch[i], rng)
    return out


# ---------------------------------------------------------------------------
# Gaussian-mixture harness
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    """Isotropic 2-D Gaussian mixture: component means, shared std, weights."""

    means: np.ndarray
    std: float
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.std <= 0:
            raise ValueError(f"MixtureSpec: std must be > 0, got {self.std}")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("MixtureSpec: weights must be nonnegative and "
                             "sum to 1")

    @classmethod
    def square(cls, half_width: float = 4.0, std: float = 0.5) -> "MixtureSpec":
        """Four equally weighted components at the corners of a square."""
        m = half_width
        means = [(-m, -m), (-m, m), (m, -m), (m, m)]
        return cls(means=np.array(means), std=std, weights=np.full(4, 0.25))


def sample_mixture(spec: MixtureSpec, n: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points and their component labels."""
    labels = rng.choice(len(spec.weights), size=n, p=spec.weights)
    points = spec.means[labels] + spec.std * rng.standard_normal((n, 2))
    return points.astype(np.float32), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches(arrays: Sequence[np.ndarray], batch_size: int,
            shuffle_seed: int) -> Iterator[tuple[np.ndarray, ...]]:
    """Seeded shuffled minibatches over parallel arrays; keeps the last
    partial batch.  Every item appears exactly once per epoch."""
    if batch_size < 1:
        raise ValueError(f"batches: batch_size must be >= 1, got {batch_size}")
    n = len(arrays[0])
    if n == 0:
        raise ValueError("batches: empty dataset")
    if any(len(a) != n for a in arrays):
        raise ValueError("batches: arrays have mismatched lengths")
    order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield tuple(a[idx] for a in arrays)


def batch_starts(n: int, batch_size: int) -> int:
    """Number of batches an epoch yields (last partial kept)."""
    return (n + batch_size - 1) // batch_size
