"""Datasets: CIFAR binary files and seeded synthetic generators."""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import os
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_LAYOUT = {"cifar10": (1, 10), "cifar100": (2, 100)}  # label bytes, classes


@dataclasses.dataclass(eq=False)
class Dataset:
    """Images in [0, 1] plus labels.

    Standardisation is not baked into ``images``; ``mean``/``std`` hold the
    per-channel statistics of the training split and :meth:`standardized`
    applies them, once, when batches are drawn.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    task: str = "classification"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ConfigError("dataset needs at least one [3, H, W] image")
        if len(self.labels) != len(self.images):
            raise ConfigError("image and label counts differ")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("labels outside [0, num_classes)")
        if self.mean is None or self.std is None:
            self.mean, self.std = channel_stats(self.images)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @functools.cached_property
    def standardized(self) -> np.ndarray:
        shape = (1, -1, 1, 1)
        out = (self.images - self.mean.reshape(shape)) / self.std.reshape(shape)
        return out.astype(np.float32)

    def with_stats(self, other: "Dataset") -> "Dataset":
        """Copy of this dataset standardised with ``other``'s statistics."""
        return dataclasses.replace(self, mean=other.mean.copy(), std=other.std.copy())

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return dataclasses.replace(
            self, images=self.images[idx], labels=self.labels[idx], mean=self.mean, std=self.std
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.split.encode())
        return h.hexdigest()[:16]


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------------------
# CIFAR binary layout


def load_cifar(path, variant: str = "cifar10", split: str = "train", stats: Dataset | None = None) -> Dataset:
    """Read a CIFAR-10/100 binary batch file.

    Records are ``label byte(s) + 3072 pixel bytes`` (R, G, B planes, each
    32x32 row-major).  For cifar100 the first byte is the coarse label and is
    skipped.  ``stats`` supplies training-split statistics for a test split.
    """
    if variant not in CIFAR_LAYOUT:
        raise ConfigError(f"variant must be one of {sorted(CIFAR_LAYOUT)}")
    label_bytes, classes = CIFAR_LAYOUT[variant]
    record = label_bytes + CIFAR_PIXELS
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    if raw.size == 0 or raw.size % record:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= classes:
        raise FormatError(f"{path}: label {labels.max()} >= {classes} classes")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    ds = Dataset(images, labels, classes, split=split)
    return ds.with_stats(stats) if stats is not None else ds


def save_cifar(ds: Dataset, path, variant: str = "cifar10") -> None:
    """Write a classification dataset in CIFAR binary layout (pixels rounded to bytes)."""
    if ds.task != "classification":
        raise ConfigError("only classification datasets fit the CIFAR layout")
    if ds.image_shape != (3, 32, 32):
        raise ConfigError("CIFAR layout needs 3x32x32 images")
    label_bytes, classes = CIFAR_LAYOUT[variant]
    if ds.num_classes > classes:
        raise ConfigError(f"{variant} holds at most {classes} classes")
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    head = np.zeros((len(ds), label_bytes), dtype=np.uint8)
    head[:, -1] = ds.labels
    np.concatenate([head, pixels], axis=1).tofile(os.fspath(path))


# ---------------------------------------------------------------------------
# synthetic data


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *stream]))


def _smooth_field(rng, channels: int, size: int, cells: int) -> np.ndarray:
    """Random low-frequency pattern in [0, 1]: a coarse grid, bilinearly upsampled."""
    coarse = rng.random((channels, cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(np.floor(pos).astype(int), cells - 1)
    t = pos - i0
    rows = coarse[:, i0, :] * (1 - t)[None, :, None] + coarse[:, i0 + 1, :] * t[None, :, None]
    return rows[:, :, i0] * (1 - t)[None, None, :] + rows[:, :, i0 + 1] * t[None, None, :]


def class_prototypes(seed: int, num_classes: int, size: int = 32, contrast: float = 1.0) -> np.ndarray:
    """[K, 3, size, size] prototypes: a shared scene plus a per-class pattern.

    Classes come in sibling pairs (0/1, 2/3, ...).  ``contrast`` is the share
    of each class pattern that is unique to the class; the rest is a pattern
    shared with its sibling.  At 1.0 all classes are equally distinct; lower
    values add hard within-pair distinctions to easy between-pair ones.
    """
    if not 0.0 < contrast <= 1.0:
        raise ConfigError(f"class contrast must lie in (0, 1], got {contrast}")
    rng = _rng(seed, 0)
    base = _smooth_field(rng, 3, size, 4)
    pairs = [_smooth_field(rng, 3, size, 8) for _ in range((num_classes + 1) // 2)]
    protos = []
    for k in range(num_classes):
        pattern = _smooth_field(rng, 3, size, 8)
        protos.append(0.5 * base + 0.5 * (1.0 - contrast) * pairs[k // 2] + 0.5 * contrast * pattern)
    return np.stack(protos).astype(np.float32)


def synth_cls(
    seed: int,
    num_classes: int = 10,
    per_class: int = 500,
    noise: float = 0.35,
    split: str = "train",
    size: int = 32,
    contrast: float = 1.0,
) -> Dataset:
    """Noisy copies of ``num_classes`` seeded prototypes, balanced per class.

    Train and test draw from independent sub-seeds of ``seed`` and share the
    prototypes.  Samples are ``clip(prototype + N(0, noise^2), 0, 1)``.
    """
    if num_classes < 2 or per_class < 1 or noise < 0 or size < 1:
        raise ConfigError("synth_cls needs num_classes >= 2, per_class >= 1, noise >= 0")
    if split not in ("train", "test"):
        raise ConfigError("split must be 'train' or 'test'")
    protos = class_prototypes(seed, num_classes, size, contrast)
    rng = _rng(seed, 1 if split == "train" else 2)
    labels = np.repeat(np.arange(num_classes), per_class)
    labels = labels[rng.permutation(labels.size)]
    images = protos[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split=split)


def _class_colors(seed: int, num_classes: int) -> np.ndarray:
    rng = _rng(seed, 10)
    return (0.3 + 0.4 * rng.random((num_classes, 3))).astype(np.float32)


def synth_seg(
    seed: int,
    num_classes: int = 4,
    count: int = 2000,
    size: int = 32,
    noise: float = 0.3,
    split: str = "train",
    num_rects: int | None = None,
) -> Dataset:
    """Toy dense-prediction scenes: background class 0 plus 1-3 coloured rectangles.

    Each rectangle gets a class in [1, K) and that class's base colour; per
    pixel Gaussian noise is added on top.  Later rectangles are painted over
    earlier ones, and the label map follows the same order.  ``num_rects``
    forces a fixed rectangle count per image.
    """
    if num_classes < 2 or count < 1 or size < 4 or noise < 0:
        raise ConfigError("synth_seg needs num_classes >= 2, count >= 1, size >= 4, noise >= 0")
    if split not in ("train", "test"):
        raise ConfigError("split must be 'train' or 'test'")
    colors = _class_colors(seed, num_classes)
    rng = _rng(seed, 11 if split == "train" else 12)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.zeros((count, size, size), dtype=np.int64)
    lo, hi = max(2, size // 5), max(3, (size * 5) // 8)
    for n in range(count):
        img = np.broadcast_to(colors[0][:, None, None], (3, size, size)).copy()
        k = int(rng.integers(1, 4)) if num_rects is None else int(num_rects)
        for _ in range(k):
            cls = int(rng.integers(1, num_classes))
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            img[:, top : top + h, left : left + w] = colors[cls][:, None, None]
            labels[n, top : top + h, left : left + w] = cls
        images[n] = img
    if noise > 0:
        images += rng.normal(0.0, noise, images.shape).astype(np.float32)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, num_classes, split=split, task="dense")


# ---------------------------------------------------------------------------
# batching


def _augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and pad-and-crop, one draw per image."""
    n, c, h, w = images.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(0, 2 * pad + 1, size=(n, 2))
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = shifts[i]
        crop = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(
    ds: Dataset,
    batch_size: int,
    epoch_seed: int = 0,
    shuffle: bool = True,
    augment: bool = False,
    with_indices: bool = False,
) -> Iterator[tuple]:
    """Yield ``(standardized images, labels)`` batches; the last one may be short.

    The order is a permutation drawn from ``epoch_seed`` when ``shuffle`` is
    set.  ``with_indices`` prepends the dataset indices of each batch.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = _rng(epoch_seed, 20).permutation(len(ds)) if shuffle else np.arange(len(ds))
    aug_rng = _rng(epoch_seed, 21) if augment else None
    images = ds.standardized
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        x = images[idx]
        if aug_rng is not None:
            x = _augment(x, aug_rng)
        yield (idx, x, ds.labels[idx]) if with_indices else (x, ds.labels[idx])


def batch_sizes(n: int, batch_size: int) -> list[int]:
    return [min(batch_size, n - s) for s in range(0, n, batch_size)]


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Where a run's train/test data comes from.

    ``kind`` is one of ``synth_cls``, ``synth_seg``, ``cifar10``,
    ``cifar100`` or ``npz`` (a file written by :func:`save_npz`).
    """

    kind: str = "synth_cls"
    seed: int = 0
    num_classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    noise: float = 0.35
    class_contrast: float = 1.0
    count: int = 2000
    test_count: int = 400
    size: int = 32
    path: str | None = None
    test_path: str | None = None
    subset: int | None = None

    def __post_init__(self):
        if self.kind not in ("synth_cls", "synth_seg", "cifar10", "cifar100", "npz"):
            raise ConfigError(f"data.kind {self.kind!r} is not supported")
        if self.kind in ("cifar10", "cifar100", "npz") and not self.path:
            raise ConfigError(f"data.path is required for kind {self.kind!r}")

    @property
    def task(self) -> str:
        return "dense" if self.kind == "synth_seg" else "classification"


def load_data(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Build (train, test) for ``cfg``; the test split uses the train statistics."""
    if cfg.kind == "synth_cls":
        train = synth_cls(cfg.seed, cfg.num_classes, cfg.per_class, cfg.noise, "train", cfg.size, cfg.class_contrast)
        test = synth_cls(cfg.seed, cfg.num_classes, cfg.test_per_class, cfg.noise, "test", cfg.size, cfg.class_contrast)
    elif cfg.kind == "synth_seg":
        train = synth_seg(cfg.seed, cfg.num_classes, cfg.count, cfg.size, split="train")
        test = synth_seg(cfg.seed, cfg.num_classes, cfg.test_count, cfg.size, split="test")
    elif cfg.kind == "npz":
        return load_npz(cfg.path)
    else:
        train = load_cifar(cfg.path, cfg.kind, "train")
        if cfg.subset:
            train = train.subset(np.arange(min(cfg.subset, len(train))))
            train = dataclasses.replace(train, mean=None, std=None)
        test_path = cfg.test_path or cfg.path
        test = load_cifar(test_path, cfg.kind, "test")
    return train, test.with_stats(train)


def save_npz(path, train: Dataset, test: Dataset) -> None:
    np.savez(
        os.fspath(path),
        train_images=train.images,
        train_labels=train.labels,
        test_images=test.images,
        test_labels=test.labels,
        num_classes=np.int64(train.num_classes),
        task=np.array(train.task),
    )


def load_npz(path) -> tuple[Dataset, Dataset]:
    try:
        with np.load(os.fspath(path)) as z:
            k, task = int(z["num_classes"]), str(z["task"])
            train = Dataset(z["train_images"], z["train_labels"], k, "train", task)
            test = Dataset(z["test_images"], z["test_labels"], k, "test", task)
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: not a dataset archive ({exc})") from exc
    return train, test.with_stats(train)
