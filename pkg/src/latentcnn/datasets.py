"""Dataset loaders, class-balanced subsets, demeaning and a synthetic generator.

All images are float64 arrays shaped (N, H, W, C) with pixel bytes scaled
to [0, 1]. Labels are int64 class indices.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, CountMismatchError, TruncatedFileError, UsageError
from .regions import canonical_offsets

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_PIXELS = 3 * 32 * 32
DATA_ROOT_ENV = "LCNN_DATA_ROOT"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def take(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


def data_root():
    return Path(os.environ.get(DATA_ROOT_ENV, Path.home() / "data"))


# ---------------------------------------------------------------- MNIST


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(buf, path, magic, n_dims):
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: header needs {need} bytes, file has {len(buf)}")
    got, *dims = struct.unpack_from(f">{1 + n_dims}i", buf)
    if got != magic:
        raise BadMagicError(f"{path}: magic {got}, expected {magic}")
    body = int(np.prod(dims))
    if len(buf) - need != body:
        raise TruncatedFileError(f"{path}: expected {body} data bytes, found {len(buf) - need}")
    return dims, np.frombuffer(buf, dtype=np.uint8, offset=need)


def load_mnist_idx(images_path, labels_path):
    (n, rows, cols), pix = _idx_header(_read(images_path), images_path, IDX_IMAGES_MAGIC, 3)
    (m,), lab = _idx_header(_read(labels_path), labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise CountMismatchError(f"{n} images in {images_path} but {m} labels in {labels_path}")
    images = pix.reshape(n, rows, cols, 1) / 255.0
    return Dataset(images, lab.astype(np.int64), 10)


def load_mnist(root=None, split="train"):
    root = Path(root or data_root() / "mnist")
    prefix = "train" if split == "train" else "t10k"

    def find(name):
        plain = root / name
        return plain if plain.exists() or not (root / f"{name}.gz").exists() else root / f"{name}.gz"

    return load_mnist_idx(find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte"))


# ---------------------------------------------------------------- CIFAR


def _cifar_records(paths, n_label_bytes):
    rec = n_label_bytes + CIFAR_PIXELS
    chunks = []
    for p in ([paths] if isinstance(paths, (str, Path)) else paths):
        buf = _read(p)
        if len(buf) % rec:
            raise TruncatedFileError(f"{p}: size {len(buf)} is not a multiple of the {rec}-byte record")
        chunks.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec))
    recs = np.concatenate(chunks)
    images = recs[:, n_label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return recs[:, :n_label_bytes], images


def load_cifar10(paths):
    labels, images = _cifar_records(paths, 1)
    return Dataset(images, labels[:, 0].astype(np.int64), 10)


def load_cifar100(paths):
    """Fine labels are kept; coarse labels are dropped."""
    labels, images = _cifar_records(paths, 2)
    return Dataset(images, labels[:, 1].astype(np.int64), 100)


# ---------------------------------------------------------------- utilities


def demean(train, test):
    """Subtract the training mean image from both splits."""
    mean = train.images.mean(axis=0)
    if test.image_shape != train.image_shape:
        raise ConfigError(f"image shapes differ: {train.image_shape} vs {test.image_shape}")
    return (Dataset(train.images - mean, train.labels, train.n_classes),
            Dataset(test.images - mean, test.labels, test.n_classes), mean)


def subset(ds, per_class, seed=0):
    """Class-balanced random subset, returned in class-interleaved index order."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < per_class:
            raise UsageError(f"class {c} has {len(idx)} samples, {per_class} requested")
        picks.append(np.sort(rng.choice(idx, per_class, replace=False)))
    return ds.take(np.sort(np.concatenate(picks)))


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    """Images of uniform noise with one class pattern pasted at a hidden location.

    The location is drawn from the five canonical offsets of a ``pattern``
    sized window and is not stored anywhere.
    """

    side: int = 16
    pattern: int = 8
    n_classes: int = 2
    noise: float = 0.3
    n_train: int = 400
    n_test: int = 200
    seed: int = 7
    contrast: float = 0.1
    candidates: int = 1

    def __post_init__(self):
        if not 1 <= self.pattern <= self.side:
            raise ConfigError(f"pattern {self.pattern} must fit side {self.side}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")


def _place(spec, pattern, offset):
    img = np.zeros((spec.side, spec.side))
    top, left = offset
    img[top:top + spec.pattern, left:left + spec.pattern] = pattern
    return img.ravel()


def fisher_separability(spec, patterns):
    """Summed pairwise Fisher ratio of whole-image class means.

    Class-conditional images are modelled as the five placements of the
    class pattern plus isotropic noise of variance noise^2 / 12. Each pair's
    ratio is divided by the squared distance between the two raw patterns,
    so the score measures how much an image-level linear template loses
    relative to a template aligned with the pattern itself.
    """
    offsets = canonical_offsets(spec.side, spec.side, spec.pattern, spec.pattern)
    placed = [np.stack([_place(spec, p, o) for o in offsets]) for p in patterns]
    means = [x.mean(axis=0) for x in placed]
    cov = np.eye(spec.side ** 2) * (spec.noise ** 2 / 12.0 + 1e-12)
    for x, m in zip(placed, means):
        d = x - m
        cov += d.T @ d / (len(offsets) * len(patterns))
    total = 0.0
    for a in range(len(patterns)):
        for b in range(a + 1, len(patterns)):
            diff = means[b] - means[a]
            raw = float(((patterns[b] - patterns[a]) ** 2).sum())
            total += float(diff @ np.linalg.solve(cov, diff)) / raw
    return total


def synthetic_patterns(spec, rng):
    """Cyclic translations of one balanced binary texture, one per class.

    The base texture has half its cells lit; class ``c`` uses it rolled by
    ``c * pattern // n_classes`` cells along both axes. All classes thus
    share content and mean intensity and differ only in arrangement. For two
    classes on the canonical grid the class difference is anti-periodic
    under the center/corner offset, which cancels the class-mean difference
    inside the center window.

    With ``spec.candidates > 1`` the texture with the lowest
    :func:`fisher_separability` among that many draws is kept.
    """
    k = spec.pattern
    step = max(1, k // spec.n_classes)
    best, best_score = None, np.inf
    while best is None:
        for _ in range(spec.candidates):
            base = np.zeros(k * k)
            base[: k * k // 2] = 1.0
            rng.shuffle(base)
            base = base.reshape(k, k)
            pats = np.stack([np.roll(base, (c * step, c * step), axis=(0, 1)) for c in range(spec.n_classes)])
            if len({p.tobytes() for p in pats}) < spec.n_classes:
                continue
            pats = pats * spec.contrast
            score = fisher_separability(spec, pats) if spec.candidates > 1 else 0.0
            if score < best_score:
                best, best_score = pats, score
    return best[..., None]


def _render(spec, patterns, n, rng):
    offsets = canonical_offsets(spec.side, spec.side, spec.pattern, spec.pattern)
    labels = rng.integers(0, spec.n_classes, size=n)
    where = rng.integers(0, len(offsets), size=n)
    images = rng.uniform(0.0, spec.noise, size=(n, spec.side, spec.side, 1)) if spec.noise else np.zeros(
        (n, spec.side, spec.side, 1))
    k = spec.pattern
    for i in range(n):
        top, left = offsets[where[i]]
        images[i, top:top + k, left:left + k] += patterns[labels[i]]
    return Dataset(images, labels.astype(np.int64), spec.n_classes), where


def gen_synthetic_latent(spec, return_locations=False):
    """Return ``(train, test)``; with ``return_locations`` also the hidden offsets."""
    pat_seq, train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(3)
    patterns = synthetic_patterns(spec, np.random.default_rng(pat_seq))
    train, loc_tr = _render(spec, patterns, spec.n_train, np.random.default_rng(train_seq))
    test, loc_te = _render(spec, patterns, spec.n_test, np.random.default_rng(test_seq))
    if return_locations:
        return train, test, (loc_tr, loc_te, patterns)
    return train, test
