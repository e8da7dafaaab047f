"""Datasets: CIFAR-10 binary loader and synthetic stand-ins."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

# named substreams of the per-run generator
STREAMS = {"data": 0, "mask": 1, "init": 2, "shuffle": 3, "template": 4, "attack": 5}


def substream(seed, name):
    """Independent generator for ``name`` derived from the run seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.n_classes)

    def concat(self, other):
        return Dataset(np.concatenate([self.x, other.x]), np.concatenate([self.y, other.y]),
                       self.n_classes)

    def class_counts(self):
        return np.bincount(self.y, minlength=self.n_classes)


def read_cifar_records(path):
    """Raw (labels, pixels) from one CIFAR-10 binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise ValueError(
            f"{path}: {raw.size} bytes is not a multiple of the {RECORD_BYTES}-byte record size"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    return rec[:, 0].astype(np.int64), rec[:, 1:]


def load_cifar10(path, class_subset=None, per_class_cap=None, split="train", return_indices=False):
    """Load CIFAR-10 binary batches.

    Parameters
    ----------
    path : str
        A single ``.bin`` file, or the ``cifar-10-batches-bin`` directory. For a
        directory, ``split`` selects ``data_batch_*.bin`` or ``test_batch.bin``.
    class_subset : sequence of int, optional
        Original class ids to keep; they are remapped to ``0..len-1`` in
        ascending order.
    per_class_cap : int, optional
        Keep at most this many examples of each class (first occurrences).
    return_indices : bool
        Also return the record indices (across the concatenated batches)
        that were kept.
    """
    if os.path.isdir(path):
        if split == "train":
            files = sorted(f for f in os.listdir(path) if f.startswith("data_batch_") and f.endswith(".bin"))
        elif split == "test":
            files = ["test_batch.bin"]
        else:
            raise ValueError(f"unknown split {split!r}")
        files = [os.path.join(path, f) for f in files]
        if not files or not all(os.path.exists(f) for f in files):
            raise FileNotFoundError(f"no CIFAR-10 {split} batches under {path}")
    else:
        files = [path]

    labels, pixels = zip(*(read_cifar_records(f) for f in files))
    labels = np.concatenate(labels)
    pixels = np.concatenate(pixels)

    classes = sorted(set(range(10)) if class_subset is None else set(int(c) for c in class_subset))
    remap = {c: i for i, c in enumerate(classes)}
    keep = []
    taken = dict.fromkeys(classes, 0)
    for i, lab in enumerate(labels):
        lab = int(lab)
        if lab not in remap:
            continue
        if per_class_cap is not None and taken[lab] >= per_class_cap:
            continue
        taken[lab] += 1
        keep.append(i)
    keep = np.asarray(keep, dtype=np.int64)
    x = pixels[keep].reshape(-1, *CIFAR_SHAPE).astype(np.float64) / 255.0
    y = np.array([remap[int(v)] for v in labels[keep]], dtype=np.int64)
    data = Dataset(x, y, len(classes))
    return (data, keep) if return_indices else data


def write_cifar_records(path, images, labels):
    """Write images in [0, 1] as CIFAR-10 binary records (used for fixtures)."""
    px = np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], px], axis=1)
    rec.tofile(path)


def gen_synthetic(kind, n, noise=0.1, seed=0):
    """Balanced two-class 2-D data: ``blobs`` or ``moons``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = substream(seed, "data")
    n0 = n - n // 2
    n1 = n // 2
    if kind == "blobs":
        c0 = np.tile([-2.0, 0.0], (n0, 1))
        c1 = np.tile([2.0, 0.0], (n1, 1))
        base = np.concatenate([c0, c1])
        base += rng.uniform(-1.0, 1.0, size=base.shape) * [1.0, 2.0]
    elif kind == "moons":
        t0 = np.linspace(0, np.pi, n0)
        t1 = np.linspace(0, np.pi, n1)
        base = np.concatenate([
            np.stack([np.cos(t0), np.sin(t0)], axis=1),
            np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
        ])
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    x = base + noise * rng.normal(size=base.shape)
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2)


def _smooth_field(rng, n, size, cutoff):
    # low-pass random field per image and channel, zero mean, unit std
    f = rng.normal(size=(n, 3, size, size))
    spec = np.fft.rfft2(f)
    ky = np.fft.fftfreq(size)[:, None]
    kx = np.fft.rfftfreq(size)[None, :]
    spec *= np.exp(-(kx ** 2 + ky ** 2) / (2 * cutoff ** 2))
    out = np.fft.irfft2(spec, s=(size, size))
    out -= out.mean(axis=(2, 3), keepdims=True)
    out /= out.std(axis=(2, 3), keepdims=True) + 1e-12
    return out


def gen_synthetic_images(n, seed=0, n_classes=2, size=32, signal=0.05, clutter=0.15, pixel_noise=0.03,
                         detail=0.0):
    """CIFAR-shaped stand-in: class prototypes buried in smooth clutter.

    Every class owns a fixed smooth colour pattern (drawn from a generator that
    does not depend on ``seed``). Each image is a grey base plus a jittered
    copy of its class pattern, random smooth clutter and pixel noise, clipped
    to [0, 1]. Classes are balanced.
    """
    proto = _smooth_field(np.random.default_rng(12345), n_classes, size, 0.08)
    rng = substream(seed, "data")
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    amp = signal * rng.uniform(0.6, 1.4, size=(n, 1, 1, 1))
    shifts = rng.integers(-2, 3, size=(n, 2))
    pat = np.stack([np.roll(proto[c], tuple(s), axis=(1, 2)) for c, s in zip(y, shifts)])
    x = 0.5 + amp * pat + clutter * _smooth_field(rng, n, size, 0.1)
    x += pixel_noise * rng.normal(size=x.shape)
    if detail:
        fine = _smooth_field(np.random.default_rng(54321), n_classes, size, 0.25)
        x += detail * fine[y]
    return Dataset(np.clip(x, 0.0, 1.0), y, n_classes)


def train_test_split(data, n_test, seed=0, return_indices=False):
    """Stratified split keeping ``n_test`` examples per class for testing."""
    rng = substream(seed, "data")
    test = []
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.y == c)
        test.extend(rng.permutation(idx)[:n_test])
    test = np.sort(np.asarray(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(data)), test)
    if return_indices:
        return data.subset(train), data.subset(test), train, test
    return data.subset(train), data.subset(test)
