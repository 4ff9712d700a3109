"""MNIST IDX and CIFAR binary readers, subsetting and normalization."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataFormatError
from ..nn.train import DatasetSplit

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_RECORD = 3072


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataFormatError(f"bad gzip stream: {exc}", path=path) from exc
    return raw


def _resolve(path: Path) -> Path:
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gz
    raise ConfigError(f"missing data file {path} (or {gz.name})")


def read_idx(path, expect_magic) -> np.ndarray:
    """uint8 array from an IDX file (optionally gzipped)."""
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError("file shorter than the IDX magic", offset=len(raw), path=path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(f"IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0, path=path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated IDX header", offset=len(raw), path=path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DataFormatError(f"truncated IDX payload: need {size} bytes after the header, have "
                              f"{len(raw) - header}", offset=len(raw), path=path)
    if len(raw) > header + size:
        raise DataFormatError("trailing bytes after IDX payload", offset=header + size, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX; gzip when ``path`` ends in .gz."""
    path = Path(path)
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def stratified_indices(labels, count, num_classes, seed=0):
    """``count`` indices with an equal share per class (first
    ``count % num_classes`` classes get one extra), in ascending order."""
    labels = np.asarray(labels)
    per, extra = divmod(count, num_classes)
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        want = per + (1 if c < extra else 0)
        if want > len(pool):
            raise ConfigError(f"class {c} has {len(pool)} samples, subset needs {want}")
        picked.append(rng.choice(pool, size=want, replace=False))
    return np.sort(np.concatenate(picked))


def channel_stats(images: np.ndarray):
    """Per-channel mean and std of float images (N, C, H, W)."""
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return ((images - mean) / np.where(std > 0, std, 1.0)).astype(np.float32)


def _finish(train_u8, train_y, test_u8, test_y, num_classes, train_subset, test_subset, seed):
    if train_subset:
        idx = stratified_indices(train_y, train_subset, num_classes, seed)
        train_u8, train_y = train_u8[idx], train_y[idx]
    if test_subset:
        idx = stratified_indices(test_y, test_subset, num_classes, seed + 1)
        test_u8, test_y = test_u8[idx], test_y[idx]
    train_f = train_u8.astype(np.float32) / 255.0
    test_f = test_u8.astype(np.float32) / 255.0
    mean, std = channel_stats(train_f)
    train = DatasetSplit(normalize(train_f, mean, std), train_y, num_classes)
    test = DatasetSplit(normalize(test_f, mean, std), test_y, num_classes)
    return train, test, {"mean": mean.tolist(), "std": std.tolist()}


def load_mnist(path, train_subset=None, test_subset=None, seed=0, with_stats=False):
    """(train, test) from the four IDX files under ``path``.

    Pixels go to [0, 1] and are then standardised with the training split's
    statistics.
    """
    root = Path(path)
    out = []
    for split in ("train", "test"):
        img_name, lbl_name = MNIST_FILES[split]
        images = read_idx(_resolve(root / img_name), IDX_IMAGES)
        labels = read_idx(_resolve(root / lbl_name), IDX_LABELS)
        if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
            raise DataFormatError(f"{split}: images {images.shape} do not pair with labels {labels.shape}",
                                  path=root)
        out += [images[:, None], labels.astype(np.int64)]
    train, test, stats = _finish(*out[:2], *out[2:], 10, train_subset, test_subset, seed)
    return (train, test, stats) if with_stats else (train, test)


def read_cifar_batch(path, variant=10):
    """(uint8 images (N, 3, 32, 32), labels) from one binary batch file."""
    path = Path(path)
    raw = _read_bytes(path)
    label_bytes = 1 if variant == 10 else 2
    record = label_bytes + CIFAR_RECORD
    if len(raw) % record:
        whole = len(raw) // record
        raise DataFormatError(f"batch length {len(raw)} is not a multiple of the {record}-byte record",
                              offset=whole * record, path=path)
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    # CIFAR-100 records carry (coarse, fine); the fine label is used
    labels = rows[:, label_bytes - 1].astype(np.int64)
    limit = 10 if variant == 10 else 100
    bad = np.flatnonzero(labels >= limit)
    if len(bad):
        raise DataFormatError(f"label {labels[bad[0]]} out of range for CIFAR-{variant}",
                              offset=int(bad[0]) * record + label_bytes - 1, path=path)
    return rows[:, label_bytes:].reshape(-1, 3, 32, 32), labels


def cifar_files(root: Path, variant):
    if variant == 10:
        return [root / f"data_batch_{i}.bin" for i in range(1, 6)], [root / "test_batch.bin"]
    return [root / "train.bin"], [root / "test.bin"]


def load_cifar(path, variant=10, train_subset=None, test_subset=None, seed=0, with_stats=False):
    if variant not in (10, 100):
        raise ConfigError(f"CIFAR variant must be 10 or 100, got {variant}")
    root = Path(path)
    train_files, test_files = cifar_files(root, variant)
    parts = []
    for files in (train_files, test_files):
        chunks = [read_cifar_batch(_resolve(f), variant) for f in files]
        parts += [np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])]
    train, test, stats = _finish(*parts, variant, train_subset, test_subset, seed)
    return (train, test, stats) if with_stats else (train, test)


__all__ = ["DatasetSplit", "load_mnist", "load_cifar", "read_idx", "write_idx", "read_cifar_batch",
           "stratified_indices", "channel_stats", "normalize"]
