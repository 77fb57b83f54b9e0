"""CIFAR-10/100 binary archives, augmentation and mini-batch streams.

Record layouts (the "binary version" archives):

* CIFAR-10: 1 label byte, then 3072 pixel bytes; five 10000-record training
  files ``data_batch_{1..5}.bin`` and one ``test_batch.bin``.
* CIFAR-100: coarse label byte, fine label byte, 3072 pixel bytes; files
  ``train.bin`` (50000 records) and ``test.bin`` (10000 records).

Pixels are stored channel-planar (all red, then green, then blue), each plane
row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from densedrop.tensor import Tensor

PIXELS = 3 * 32 * 32


class CorruptArchiveError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    label_bytes: int
    classes: int
    train_files: Tuple[str, ...]
    test_files: Tuple[str, ...]
    records_per_file: Tuple[int, ...]
    test_records: int
    subdir: str

    @property
    def record_size(self) -> int:
        return self.label_bytes + PIXELS


LAYOUTS = {
    "c10": Layout(
        1,
        10,
        tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        ("test_batch.bin",),
        (10000,) * 5,
        10000,
        "cifar-10-batches-bin",
    ),
    "c100": Layout(2, 100, ("train.bin",), ("test.bin",), (50000,), 10000, "cifar-100-binary"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, 32, 32) uint8
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int
    coarse_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.shape[1:] != (3, 32, 32) or self.images.dtype != np.uint8:
            raise ValueError(f"images must be N x 3 x 32 x 32 uint8, got {self.images.shape} {self.images.dtype}")
        if len(self.labels) != len(self.images):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "Dataset":
        coarse = None if self.coarse_labels is None else self.coarse_labels[index]
        return replace(self, images=self.images[index], labels=self.labels[index], coarse_labels=coarse)


def _resolve_dir(path: Path, layout: Layout) -> Path:
    if (path / layout.subdir).is_dir() and not (path / layout.test_files[0]).exists():
        return path / layout.subdir
    return path


def load_cifar(path, variant: str = "c10", split: str = "train") -> Dataset:
    """Read a split from a directory holding the binary archives.

    ``path`` may be the directory with the ``.bin`` files or its parent.
    """
    if variant not in LAYOUTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}; expected c10 or c100")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    layout = LAYOUTS[variant]
    root = _resolve_dir(Path(path), layout)
    if split == "train":
        files, counts = layout.train_files, layout.records_per_file
    else:
        files, counts = layout.test_files, (layout.test_records,)

    chunks = []
    for name, count in zip(files, counts):
        f = root / name
        if not f.is_file():
            raise FileNotFoundError(f"missing CIFAR archive {f}")
        raw = f.read_bytes()
        expected = count * layout.record_size
        if len(raw) != expected:
            raise CorruptArchiveError(f"{f}: expected {expected} bytes, found {len(raw)}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(count, layout.record_size))
    records = np.concatenate(chunks)
    images = records[:, layout.label_bytes :].reshape(-1, 3, 32, 32).copy()
    labels = records[:, layout.label_bytes - 1].astype(np.int64)
    coarse = records[:, 0].astype(np.int64) if layout.label_bytes == 2 else None
    return Dataset(images, labels, split, layout.classes, coarse)


def encode_records(ds: Dataset, variant: str = "c10") -> bytes:
    """Serialize a dataset back to the archive record format."""
    layout = LAYOUTS[variant]
    n = len(ds)
    rec = np.empty((n, layout.record_size), dtype=np.uint8)
    if layout.label_bytes == 2:
        coarse = ds.coarse_labels if ds.coarse_labels is not None else np.zeros(n, dtype=np.int64)
        rec[:, 0] = coarse
    rec[:, layout.label_bytes - 1] = ds.labels
    rec[:, layout.label_bytes :] = ds.images.reshape(n, PIXELS)
    return rec.tobytes()


def write_cifar(directory, train: Dataset, test: Dataset, variant: str = "c10") -> Path:
    """Write ``train`` and ``test`` as a complete archive set of the canonical sizes."""
    layout = LAYOUTS[variant]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if len(train) != sum(layout.records_per_file) or len(test) != layout.test_records:
        raise ValueError("archive sets must hold the canonical record counts")
    start = 0
    for name, count in zip(layout.train_files, layout.records_per_file):
        part = train.subset(np.arange(start, start + count))
        (directory / name).write_bytes(encode_records(part, variant))
        start += count
    (directory / layout.test_files[0]).write_bytes(encode_records(test, variant))
    return directory


def synthetic_cifar(seed: int = 0, variant: str = "c10", noise: float = 48.0) -> Tuple[Dataset, Dataset]:
    """Class-structured stand-in data with the canonical split sizes.

    Each class has a smooth random template; images are the template,
    randomly shifted, plus pixel noise. Useful for smoke runs when the real
    archives are unavailable.
    """
    layout = LAYOUTS[variant]
    rng = np.random.default_rng(seed)
    coarse_grid = rng.normal(0.0, 1.0, size=(layout.classes, 3, 8, 8))
    templates = np.repeat(np.repeat(coarse_grid, 4, axis=2), 4, axis=3)
    templates = 128.0 + 40.0 * templates

    def make(n: int, split: str) -> Dataset:
        labels = np.arange(n) % layout.classes
        rng.shuffle(labels)
        shifts = rng.integers(-3, 4, size=(n, 2))
        imgs = np.empty((n, 3, 32, 32), dtype=np.uint8)
        for lo in range(0, n, 2000):
            hi = min(n, lo + 2000)
            base = templates[labels[lo:hi]]
            base = np.stack([np.roll(b, tuple(s), axis=(1, 2)) for b, s in zip(base, shifts[lo:hi])])
            base = base + rng.normal(0.0, noise, size=base.shape)
            imgs[lo:hi] = np.clip(np.rint(base), 0, 255).astype(np.uint8)
        coarse = labels // 5 if layout.label_bytes == 2 else None
        return Dataset(imgs, labels.astype(np.int64), split, layout.classes, coarse)

    return make(sum(layout.records_per_file), "train"), make(layout.test_records, "test")


@dataclass(frozen=True)
class AugmentPolicy:
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    flip_prob: float = 0.5
    pad: int = 4

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "AugmentPolicy":
        # Exact integer moments, chunked to keep memory flat on the full split.
        s1 = np.zeros(3, dtype=np.int64)
        s2 = np.zeros(3, dtype=np.int64)
        for lo in range(0, len(ds), 4096):
            chunk = ds.images[lo : lo + 4096].astype(np.int64)
            s1 += chunk.sum(axis=(0, 2, 3))
            s2 += (chunk * chunk).sum(axis=(0, 2, 3))
        count = len(ds) * 32 * 32
        mean = s1 / count
        var = s2 / count - mean * mean
        return cls(tuple(float(v) for v in mean / 255.0), tuple(float(v) for v in np.sqrt(var) / 255.0))

    def normalize(self, images: np.ndarray, dtype=np.float32) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=dtype).reshape(1, 3, 1, 1)
        std = np.asarray(self.std, dtype=dtype).reshape(1, 3, 1, 1)
        return (images.astype(dtype) / np.asarray(255.0, dtype=dtype) - mean) / std


def augment_batch(
    images: np.ndarray,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    flips: Optional[np.ndarray] = None,
    offsets: Optional[np.ndarray] = None,
    dtype=np.float32,
) -> np.ndarray:
    """Flip, translate and standardize a uint8 batch.

    Images are standardized first and then zero-padded, so the border is
    filled with the per-channel training mean. ``flips`` and ``offsets``
    override the random draws (offset ``(pad, pad)`` is the untranslated crop).
    """
    n = images.shape[0]
    pad = policy.pad
    if flips is None:
        flips = rng.random(n) < policy.flip_prob
    if offsets is None:
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    x = policy.normalize(images, dtype)
    x = np.where(np.asarray(flips)[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for idx, (dy, dx) in enumerate(offsets):
        out[idx] = padded[idx, :, dy : dy + 32, dx : dx + 32]
    return out


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator, **overrides) -> np.ndarray:
    return augment_batch(image[None], policy, rng, **overrides)[0]


def stratified_subset(ds: Dataset, size: int, seed: int) -> Dataset:
    """Fixed subset with equal counts per class, chosen once from ``seed``."""
    if size > len(ds):
        raise ValueError(f"subset of {size} requested from {len(ds)} examples")
    if size % ds.num_classes:
        raise ValueError(f"subset size {size} is not divisible by {ds.num_classes} classes")
    per_class = size // ds.num_classes
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < per_class:
            raise ValueError(f"class {c} has only {len(members)} examples, need {per_class}")
        picks.append(rng.choice(members, size=per_class, replace=False))
    return ds.subset(np.sort(np.concatenate(picks)))


def batches(
    ds: Dataset,
    batch_size: int,
    rng: Optional[np.random.Generator],
    policy: AugmentPolicy,
    train: bool = True,
    dtype=np.float32,
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """One epoch of mini-batches.

    Training batches are shuffled and augmented; test batches keep dataset
    order and are only standardized. The last batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    order = rng.permutation(len(ds)) if train else np.arange(len(ds))
    for lo in range(0, len(ds), batch_size):
        idx = order[lo : lo + batch_size]
        imgs = ds.images[idx]
        if train:
            x = augment_batch(imgs, policy, rng, dtype=dtype)
        else:
            x = policy.normalize(imgs, dtype)
        yield Tensor(x), ds.labels[idx]


def batch_count(n: int, batch_size: int) -> List[int]:
    full, rem = divmod(n, batch_size)
    return [batch_size] * full + ([rem] if rem else [])
