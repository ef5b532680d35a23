"""Datasets: CIFAR-10 binary batches, P6 class directories and the
synthetic two-patch set, plus seeded splitting and k-per-class subsampling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .ppm import read_ppm

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
CIFAR_FILES = ("data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class Dataset:
    images: np.ndarray  # n x h x w x c, values in [0, 1]
    labels: np.ndarray
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    class_names: tuple[str, ...] = ()
    split_seed: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError("images must be n x h x w x c with one label each")
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(int(self.labels.max()) + 1))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise ConfigError(f"dataset has no {name!r} split", key="split")
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]

    def check_splits(self) -> None:
        allidx = np.concatenate([self.splits[k] for k in ("train", "val", "test")])
        if len(allidx) != len(self.labels) or len(np.unique(allidx)) != len(allidx):
            raise ConfigError("splits must be disjoint and cover every index")


def random_split(n: int, seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    """Seeded shuffle of ``range(n)`` cut into train/val/test."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


# -- CIFAR-10 ------------------------------------------------------------------


def parse_cifar10_bytes(blob: bytes, source="<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode records of one label byte plus R, G, B planes (32x32 each)."""
    if len(blob) % CIFAR_RECORD:
        raise FormatError(f"{source}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{source}: record {bad} has label {labels[bad]} > 9")
    planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return planes.transpose(0, 2, 3, 1).copy(), labels


def encode_cifar10(images_u8: np.ndarray, labels) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    return np.concatenate([labels, planes], axis=1).tobytes()


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(uint8 images n x 32 x 32 x 3, labels)`` for one batch file."""
    path = Path(path)
    return parse_cifar10_bytes(path.read_bytes(), source=str(path))


def write_cifar10_batch(path, images, labels) -> None:
    """Write images (uint8, or floats in [0, 1]) as a CIFAR-10 binary batch."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(encode_cifar10(images, labels))


def load_cifar10(directory, split_seed: int = 0) -> Dataset:
    """Load every standard batch file present in ``directory``."""
    directory = Path(directory)
    files = [directory / f for f in CIFAR_FILES if (directory / f).exists()]
    if not files:
        files = sorted(directory.glob("*.bin"))
    if not files:
        raise ConfigError(f"no CIFAR-10 batch files in {directory}", key="data_dir")
    imgs, labels = zip(*(read_cifar10_batch(f) for f in files))
    images = np.concatenate(imgs).astype(np.float64) / 255.0
    labels = np.concatenate(labels)
    return Dataset(images, labels, random_split(len(labels), split_seed), CIFAR_CLASSES, split_seed)


# -- P6 class directories ------------------------------------------------------


def load_image_dir(directory, split_seed: int = 0) -> Dataset:
    """One subdirectory per class (sorted names), each holding ``*.ppm`` files."""
    directory = Path(directory)
    classes = sorted(p.name for p in directory.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"no class subdirectories in {directory}", key="data_dir")
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((directory / name).glob("*.ppm")):
            images.append(read_ppm(f).astype(np.float64) / 255.0)
            labels.append(label)
    if len({im.shape for im in images}) != 1:
        raise FormatError(f"{directory}: images do not share one shape")
    return Dataset(np.stack(images), np.array(labels), random_split(len(labels), split_seed), tuple(classes), split_seed)


# -- subsampling ---------------------------------------------------------------


def subsample(dataset: Dataset, k_per_class: int, seed: int) -> Dataset:
    """Keep exactly ``k_per_class`` training samples per class; val/test untouched."""
    rng = np.random.default_rng(seed)
    train = dataset.splits["train"]
    keep = []
    for c in range(dataset.n_classes):
        pool = train[dataset.labels[train] == c]
        if len(pool) < k_per_class:
            raise ConfigError(f"class {c} has only {len(pool)} training samples, need {k_per_class}", key="k_per_class")
        keep.append(rng.choice(pool, size=k_per_class, replace=False))
    splits = dict(dataset.splits)
    splits["train"] = np.sort(np.concatenate(keep))
    return replace(dataset, splits=splits)


# -- synthetic two-patch dataset -----------------------------------------------


def _cross(img, cy, cx, r):
    img[cy - r : cy + r + 1, cx] = 1.0
    img[cy, cx - r : cx + r + 1] = 1.0


def _ring(img, cy, cx, r):
    yy, xx = np.mgrid[: img.shape[0], : img.shape[1]]
    dist = np.hypot(yy - cy, xx - cx)
    img[np.abs(dist - r) < 0.75] = 1.0


BACKGROUND_CEILING = 0.1


def glyph_geometry(image_size: int) -> tuple[int, int, int]:
    """``(quadrant side, glyph radius, jitter)`` for a given image size."""
    q = image_size // 2
    r = max(1, q // 4)
    return q, r, 2


def make_two_patch(n_per_class: int, image_size: int = 16, seed: int = 0, channels: int = 1) -> Dataset:
    """Two-class images on uniform noise in ``[0, 0.1]``.

    Class 1 carries a bright cross in the upper-left quadrant and a bright
    ring in the lower-right quadrant (each jittered by up to 2 px); class 0
    carries neither. Either glyph alone identifies class 1.
    """
    if image_size < 16:
        raise ConfigError("two-patch images need image_size >= 16", key="image_size")
    rng = np.random.default_rng(seed)
    q, r, jitter = glyph_geometry(image_size)
    lo, hi = r, q - 1 - r
    n = 2 * n_per_class
    images = rng.uniform(0.0, BACKGROUND_CEILING, size=(n, image_size, image_size))
    labels = np.repeat([0, 1], n_per_class)
    for i in np.flatnonzero(labels == 1):
        cy, cx = np.clip(q // 2 + rng.integers(-jitter, jitter + 1, size=2), lo, hi)
        _cross(images[i], cy, cx, r)
        cy, cx = np.clip(q // 2 + rng.integers(-jitter, jitter + 1, size=2), lo, hi)
        _ring(images[i], q + cy, q + cx, r)
    images = np.repeat(images[..., None], channels, axis=-1)
    order = rng.permutation(n)
    images, labels = images[order], labels[order]
    return Dataset(images, labels, random_split(n, seed), ("plain", "two_patch"), seed)


def write_split_manifest(dataset: Dataset, path) -> None:
    """``split=<name> count=<n> indices=<i,j,...>`` one line per split."""
    lines = [f"split_seed={dataset.split_seed}"]
    for name in ("train", "val", "test"):
        idx = dataset.splits[name]
        lines.append(f"split={name} count={len(idx)} indices={','.join(map(str, idx.tolist()))}")
    Path(path).write_text("\n".join(lines) + "\n")
