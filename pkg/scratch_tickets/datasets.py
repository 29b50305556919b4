"""IDX (MNIST, Fashion-MNIST), CIFAR-10 binary batches and synthetic toy data."""
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .const import DATA_DIR_ENV, DEFAULT_BOUNDS, DEFAULT_DATA_DIR, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from .prng import Prng
from .tensor import get_default_dtype

_LOGGER = logging.getLogger(__name__)

_GZIP_MAGIC = b"\x1f\x8b"

_CIFAR_RECORD = 1 + 3 * 32 * 32

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX or CIFAR binary input."""

    def __init__(self, path: Union[str, Path], offset: int, message: str):
        super().__init__(f"{path}: {message} (at byte offset {offset})")
        self.path = str(path)
        self.offset = offset


@dataclass
class Split:
    """Images scaled to [0, 1] (N x C x H x W or N x D) and int64 labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def head(self, count: int) -> "Split":
        """First `count` examples; 0 keeps everything."""
        if count <= 0 or count >= len(self):
            if count > len(self):
                _LOGGER.warning("Requested %s examples but only %s are available", count, len(self))
            return self
        return Split(self.x[:count], self.y[:count])

    def take(self, indices: Sequence[int]) -> "Split":
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.x[indices], self.y[indices])


@dataclass
class Dataset:
    name: str
    train: Split
    test: Split
    num_classes: int
    bounds: Tuple[float, float] = DEFAULT_BOUNDS
    normalization: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for split_name, split in (("train", self.train), ("test", self.test)):
            if len(split) and (split.y.min() < 0 or split.y.max() >= self.num_classes):
                raise ValueError(f"{self.name} {split_name} labels outside [0, {self.num_classes})")

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train.x.shape[1:])

    def subset(self, train_limit: int = 0, test_limit: int = 0) -> "Dataset":
        return Dataset(
            self.name,
            self.train.head(train_limit),
            self.test.head(test_limit),
            self.num_classes,
            self.bounds,
            dict(self.normalization),
        )


# -----------------------------------------------------------------------------
# IDX


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as raw_file:
        data = raw_file.read()

    if data[:2] == _GZIP_MAGIC:
        data = gzip.decompress(data)

    return data


def parse_idx(data: bytes, path: Union[str, Path] = "<bytes>", dtype=None) -> np.ndarray:
    """Decode IDX bytes.

    Images (magic 0x00000803) become N x 1 x H x W arrays scaled by 1/255;
    labels (magic 0x00000801) become an int64 vector.
    """
    if len(data) < 4:
        raise IdxFormatError(path, 0, f"expected 4 magic bytes, got {len(data)}")

    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise IdxFormatError(
            path,
            0,
            f"wrong magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x} (labels) "
            f"or 0x{IDX_IMAGES_MAGIC:08x} (images)",
        )

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise IdxFormatError(
            path, len(data), f"header needs {header_size} bytes, got {len(data)}"
        )

    dims = struct.unpack_from(f">{ndim}I", data, 4)
    expected = int(np.prod(dims))
    actual = len(data) - header_size
    if actual < expected:
        raise IdxFormatError(
            path,
            header_size,
            f"truncated payload: dimensions {dims} need {expected} bytes, got {actual}",
        )

    values = np.frombuffer(data, dtype=np.uint8, count=expected, offset=header_size)
    if magic == IDX_LABELS_MAGIC:
        return values.astype(np.int64)

    dtype = dtype or get_default_dtype()
    images = values.reshape((dims[0], 1) + tuple(dims[1:]))
    return (images / 255.0).astype(dtype)


def load_idx(path: Union[str, Path], dtype=None) -> np.ndarray:
    """Read an IDX file, gzip-compressed or not."""
    path = Path(path)
    return parse_idx(_read_bytes(path), path, dtype)


def _find(directory: Path, stem: str) -> Path:
    for candidate in (stem, f"{stem}.gz", stem.replace("-idx", ".idx")):
        path = directory / candidate
        if path.exists():
            return path

    raise FileNotFoundError(f"No {stem}[.gz] in {directory}")


def data_root(root: Optional[Union[str, Path]] = None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR))


def load_mnist(
    root: Optional[Union[str, Path]] = None, name: str = "mnist", dtype=None
) -> Dataset:
    """MNIST or Fashion-MNIST from <root>/<name>/ (or <root> itself)."""
    root = data_root(root)
    directory = root / name if (root / name).is_dir() else root
    splits = {}
    for split_name, (images_stem, labels_stem) in _MNIST_FILES.items():
        images = load_idx(_find(directory, images_stem), dtype)
        labels = load_idx(_find(directory, labels_stem))
        if len(images) != len(labels):
            raise IdxFormatError(
                directory / labels_stem, 4, f"{len(images)} images but {len(labels)} labels"
            )
        splits[split_name] = Split(images, labels)

    _LOGGER.debug("Loaded %s from %s", name, directory)
    return Dataset(name, splits["train"], splits["test"], 10, normalization={"scale": 1 / 255})


# -----------------------------------------------------------------------------
# CIFAR-10


def parse_cifar_batch(data: bytes, path: Union[str, Path] = "<bytes>", dtype=None) -> Split:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    if len(data) % _CIFAR_RECORD:
        complete = len(data) // _CIFAR_RECORD
        raise IdxFormatError(
            path,
            complete * _CIFAR_RECORD,
            f"truncated record: expected {_CIFAR_RECORD} bytes, got {len(data) % _CIFAR_RECORD}",
        )

    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if len(labels) and labels.max() > 9:
        row = int(np.argmax(labels > 9))
        raise IdxFormatError(path, row * _CIFAR_RECORD, f"label {labels[row]} outside [0, 10)")

    dtype = dtype or get_default_dtype()
    images = (records[:, 1:].reshape(-1, 3, 32, 32) / 255.0).astype(dtype)
    return Split(images, labels)


def load_cifar10(root: Optional[Union[str, Path]] = None, dtype=None) -> Dataset:
    root = data_root(root)
    directory = root / "cifar-10-batches-bin"
    if not directory.is_dir():
        directory = root

    def read(file_name: str) -> Split:
        path = directory / file_name
        return parse_cifar_batch(_read_bytes(path), path, dtype)

    train_batches = [read(f"data_batch_{index}.bin") for index in range(1, 6)]
    train = Split(
        np.concatenate([batch.x for batch in train_batches]),
        np.concatenate([batch.y for batch in train_batches]),
    )
    return Dataset("cifar10", train, read("test_batch.bin"), 10, normalization={"scale": 1 / 255})


# -----------------------------------------------------------------------------
# Synthetic


def make_toy_dataset(
    prng: Prng,
    train_size: int = 256,
    test_size: int = 256,
    features: int = 2,
    num_classes: int = 2,
    spread: float = 0.05,
    dtype=None,
) -> Dataset:
    """Separable toy task in [0, 1]^features.

    Class c sits at 0.75 on feature c and 0.25 on every other feature, so a
    bias-free linear layer separates it with margin.
    """
    if features < num_classes:
        raise ValueError(f"Need at least {num_classes} features, got {features}")

    dtype = dtype or get_default_dtype()

    def draw(stream: Prng, size: int) -> Split:
        labels = stream.split("labels").permutation(size) % num_classes
        centers = np.full((size, features), 0.25)
        centers[np.arange(size), labels] = 0.75
        noise = stream.split("noise").normal(spread, (size, features))
        return Split(np.clip(centers + noise, 0.0, 1.0).astype(dtype), labels.astype(np.int64))

    return Dataset(
        "toy",
        draw(prng.split("train"), train_size),
        draw(prng.split("test"), test_size),
        num_classes,
        normalization={"centers": (0.25, 0.75), "spread": spread},
    )


def load_dataset(
    name: str,
    root: Optional[Union[str, Path]] = None,
    train_limit: int = 0,
    test_limit: int = 0,
    seed: int = 0,
    dtype=None,
) -> Dataset:
    """Dataset by config name, trimmed to the requested sizes."""
    if name in ("mnist", "fashion-mnist"):
        dataset = load_mnist(root, name, dtype)
    elif name == "cifar10":
        dataset = load_cifar10(root, dtype)
    elif name == "toy":
        dataset = make_toy_dataset(
            Prng(seed).split("toy"), train_limit or 256, test_limit or 256, dtype=dtype
        )
    else:
        raise ValueError(f"Unknown dataset '{name}'")

    return dataset.subset(train_limit, test_limit)
