"""Dataset container, DSB1 file format, synthetic generator and batching.

The DSB1 container is a little-endian binary layout:

    magic "DSB1" | u32 num_classes | u32 channels | u32 H | u32 W
    | u32 N_train | u32 N_test
    | train pixels (u8, N_train*ch*H*W) | train labels (u16)
    | test pixels (u8) | test labels (u16)

Per-channel normalization statistics are always recomputed from the train
split on load, never stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, default_dtype

MAGIC = b"DSB1"
_HEADER = struct.Struct("<4s6I")


class DatasetError(ValueError):
    """Malformed dataset file or inconsistent bundle contents."""


@dataclass
class DatasetBundle:
    """In-memory dataset: uint8 images [N, ch, H, W] plus integer labels."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        for name, images, labels in (("train", self.train_images, self.train_labels),
                                      ("test", self.test_images, self.test_labels)):
            if images.ndim != 4 or images.dtype != np.uint8:
                raise DatasetError(f"{name} images must be uint8 [N,ch,H,W], got {images.dtype} {images.shape}")
            if labels.shape != (images.shape[0],):
                raise DatasetError(f"{name} labels shape {labels.shape} does not match {images.shape[0]} images")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"{name} labels outside [0, {self.num_classes})")
        if self.train_images.shape[1:] != self.test_images.shape[1:]:
            raise DatasetError(
                f"train/test image shapes differ: {self.train_images.shape[1:]} vs {self.test_images.shape[1:]}")
        if self.train_images.shape[0] == 0:
            raise DatasetError("train split is empty")
        if self.test_images.shape[0] == 0:
            raise DatasetError("test split is empty (evaluation impossible)")
        # per-channel stats from the train split only, in [0, 1] pixel space
        scaled = self.train_images.astype(np.float64) / 255.0
        self.mean = scaled.mean(axis=(0, 2, 3))
        self.std = np.maximum(scaled.std(axis=(0, 2, 3)), 1e-6)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise ValueError(f"unknown split {name!r}")


def save_dataset(bundle: DatasetBundle, path) -> None:
    ch, h, w = bundle.image_shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, bundle.num_classes, ch, h, w,
                              bundle.train_images.shape[0], bundle.test_images.shape[0]))
        fh.write(bundle.train_images.tobytes())
        fh.write(bundle.train_labels.astype("<u2").tobytes())
        fh.write(bundle.test_images.tobytes())
        fh.write(bundle.test_labels.astype("<u2").tobytes())


def load_dataset(path) -> DatasetBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, num_classes, ch, h, w, n_train, n_test = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    pixels = ch * h * w
    expected = _HEADER.size + n_train * pixels + 2 * n_train + n_test * pixels + 2 * n_test
    if len(raw) != expected:
        raise DatasetError(f"{path}: truncated or oversized file ({len(raw)} bytes, expected {expected})")
    offset = _HEADER.size

    def take(count, dtype):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    train_images = take(n_train * pixels, np.uint8).reshape(n_train, ch, h, w).copy()
    train_labels = take(n_train, "<u2").astype(np.int64)
    test_images = take(n_test * pixels, np.uint8).reshape(n_test, ch, h, w).copy()
    test_labels = take(n_test, "<u2").astype(np.int64)
    try:
        return DatasetBundle(train_images, train_labels, test_images, test_labels, num_classes)
    except DatasetError as err:
        raise DatasetError(f"{path}: {err}") from None


def synth_dataset(classes: int, per_class: int, height: int = 32, width: int = 32,
                  seed: int = 0, test_per_class: int | None = None, channels: int = 1,
                  noise: float = 0.12) -> DatasetBundle:
    """Deterministic class-conditional texture dataset.

    Each class is an oriented grating with class-specific orientation,
    frequency and phase; samples vary by amplitude, a small phase jitter and
    additive pixel noise. Easy enough that a nearest-centroid classifier
    clears 80%, noisy enough that compressed models have headroom to differ.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if test_per_class is None:
        test_per_class = max(1, per_class // 2)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    scale = max(height, width)

    def make_split(count_per_class):
        images = np.empty((classes * count_per_class, channels, height, width), dtype=np.uint8)
        labels = np.empty(classes * count_per_class, dtype=np.int64)
        row = 0
        for k in range(classes):
            theta = np.pi * k / classes
            freq = 2.0 + 1.5 * k
            phase = 2.0 * np.pi * k / classes + 0.7
            carrier = 2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / scale
            for _ in range(count_per_class):
                amp = rng.uniform(0.55, 0.95)
                jitter = rng.uniform(-0.35, 0.35)
                img = 0.5 + 0.5 * amp * np.sin(carrier + phase + jitter)
                img = img + rng.normal(0.0, noise, size=img.shape)
                img8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
                images[row] = img8[None, :, :] if channels == 1 else np.repeat(img8[None, :, :], channels, 0)
                labels[row] = k
                row += 1
        return images, labels

    train_images, train_labels = make_split(per_class)
    test_images, test_labels = make_split(test_per_class)
    return DatasetBundle(train_images, train_labels, test_images, test_labels, classes)


def normalize_images(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """(x/255 - mean) / std per channel, in the active float dtype."""
    dtype = default_dtype()
    x = images.astype(dtype) / dtype.type(255.0)
    mean = mean.astype(dtype).reshape(1, -1, 1, 1)
    std = std.astype(dtype).reshape(1, -1, 1, 1)
    return (x - mean) / std


def batches(bundle: DatasetBundle, batch_size: int, seed: int = 0, shuffle: bool = True,
            split: str = "train"):
    """One epoch of (Tensor images, label array) batches.

    Shuffling is a seeded Fisher-Yates permutation; the final partial batch is
    included. Images are normalized with the train-split statistics.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    images, labels = bundle.split(split)
    n = images.shape[0]
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batch = normalize_images(images[idx], bundle.mean, bundle.std)
        yield Tensor(batch), labels[idx]


def epoch_seed(seed: int, epoch: int) -> int:
    """Derived per-epoch shuffle seed, so mid-training restores need no RNG
    state: the stream is a pure function of (run seed, epoch)."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def convert_cifar10(batch_files, out_path, train_count: int | None = None) -> DatasetBundle:
    """Convert standard CIFAR-10 binary batches (1 label byte + 3072 pixel
    bytes per record) into a DSB1 file. The last file is used as the test
    split unless only one file is given (then it is split 5:1)."""
    records = []
    for path in batch_files:
        with open(path, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype=np.uint8)
        if raw.size % 3073 != 0:
            raise DatasetError(f"{path}: not a multiple of the 3073-byte CIFAR-10 record")
        rec = raw.reshape(-1, 3073)
        records.append((rec[:, 0].astype(np.int64), rec[:, 1:].reshape(-1, 3, 32, 32)))
    if len(records) == 1:
        labels, images = records[0]
        cut = train_count if train_count is not None else (images.shape[0] * 5) // 6
        bundle = DatasetBundle(images[:cut].copy(), labels[:cut].copy(),
                               images[cut:].copy(), labels[cut:].copy(), 10)
    else:
        train_labels = np.concatenate([lab for lab, _ in records[:-1]])
        train_images = np.concatenate([img for _, img in records[:-1]])
        test_labels, test_images = records[-1]
        bundle = DatasetBundle(train_images.copy(), train_labels, test_images.copy(), test_labels, 10)
    save_dataset(bundle, out_path)
    return bundle
