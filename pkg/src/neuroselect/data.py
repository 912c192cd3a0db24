"""Datasets: IDX files, synthetic blobs, seeded splits and batching.

Images are always ``(N, C, H, W)`` floats in ``[0, 1]`` with integer labels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def take(self, indices, provenance=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.n_classes,
                       provenance or self.provenance)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def read_idx(path, expected_magic):
    """Raw ``uint8`` array from an IDX file with the given magic."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, magic needs 4 bytes")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, dimension header ends at {head}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, payload ends at {expected}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after byte {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None):
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} images (count at byte 4) but "
                          f"{labels_path} holds {len(labels)} labels (count at byte 4)")
    if len(images) == 0:
        raise DataError(f"{images_path}: no samples")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), n_classes, provenance=f"idx:{Path(images_path).name}")


def idx_bytes(array, magic):
    array = np.asarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def write_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as an IDX image/label pair."""
    if dataset.images.shape[1] != 1:
        raise DataError("IDX images are single-channel")
    pixels = np.rint(dataset.images[:, 0] * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DataError("pixel values must lie in [0, 1]")
    Path(images_path).write_bytes(idx_bytes(pixels, IDX_IMAGES_MAGIC))
    Path(labels_path).write_bytes(idx_bytes(dataset.labels, IDX_LABELS_MAGIC))


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


def load_digits_dataset():
    """The 8x8 handwritten digits bundled with scikit-learn (1797 samples)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0)[:, None, :, :]
    return Dataset(x, d.target, 10, provenance="sklearn-digits")


def class_subset(dataset, classes):
    """Samples of ``classes`` only, relabelled ``0..len(classes)-1`` in the given order."""
    classes = [int(c) for c in classes]
    lookup = {c: i for i, c in enumerate(classes)}
    keep = np.flatnonzero(np.isin(dataset.labels, classes))
    if keep.size == 0:
        raise DataError(f"no samples for classes {classes}")
    labels = np.asarray([lookup[int(c)] for c in dataset.labels[keep]], dtype=np.int64)
    return Dataset(dataset.images[keep], labels, len(classes),
                   provenance=f"{dataset.provenance}[{','.join(map(str, classes))}]")


def synth_blobs(classes, dims, samples_per_class, separation, seed=0, max_tries=100):
    """Unit-variance Gaussian clusters whose centres are ``separation`` apart.

    Samples are laid out as ``(N, 1, 1, dims)`` images and min-max scaled
    into ``[0, 1]`` with one global affine map, which keeps the geometry.
    """
    if min(classes, dims, samples_per_class) < 1 or separation <= 0:
        raise DataError("counts must be >= 1 and separation > 0")
    rng = np.random.default_rng(seed)
    side = 2.0 * separation * max(classes, 2) ** (1.0 / dims)
    for _ in range(max_tries):
        centers = rng.uniform(0, side, size=(classes, dims))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if classes == 1 or d[np.triu_indices(classes, 1)].min() >= separation:
            break
    else:
        raise DataError(f"could not place {classes} centres {separation} apart in {dims} dims")
    x = np.concatenate([c + rng.standard_normal((samples_per_class, dims)) for c in centers])
    x = (x - x.min()) / max(x.max() - x.min(), 1e-12)
    y = np.repeat(np.arange(classes), samples_per_class)
    return Dataset(x.reshape(len(x), 1, 1, dims), y, classes,
                   provenance=f"blobs(c={classes},d={dims},n={samples_per_class},s={separation},seed={seed})")


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def split(dataset, fractions, seed=0):
    """Seeded permutation, then contiguous slices sized by ``fractions``."""
    fractions = [float(f) for f in np.atleast_1d(fractions)]
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise DataError(f"fractions must be positive and sum to at most 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.floor(np.cumsum([0.0] + fractions) * n + 1e-9).astype(int)
    parts = []
    for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        if hi <= lo:
            raise DataError(f"split {k} of {fractions} is empty for {n} samples")
        parts.append(dataset.take(perm[lo:hi]))
    return tuple(parts)


def batches(dataset, batch_size, seed=None):
    """Yield ``(images, labels)`` mini-batches; shuffled when ``seed`` is given."""
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
