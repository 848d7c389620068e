"""Dataset loading (IDX), synthetic blobs, deterministic splits and the
on-disk dataset container."""
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (BadMagicError, CountMismatchError, ParameterError,
                         TruncatedFileError)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CONTAINER_VERSION = 1
DATA_DIR_ENV = "DDDM_DATA_DIR"

MNIST_IMAGES = "mnist-images-idx3-ubyte.gz"
MNIST_LABELS = "mnist-labels-idx1-ubyte.gz"


@dataclass
class Dataset:
    """Features in [0, 1] (one row per example) with integer class labels."""
    features: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ParameterError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("labels must have one entry per feature row")
        if self.features.size and (self.features.min() < 0 or self.features.max() > 1):
            raise ParameterError("features must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise ParameterError("labels must be nonnegative")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, **meta):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], {**self.meta, **meta})


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None):
    """Parse one IDX file into a uint8 array.

    Only the unsigned-byte element type (0x08) is supported, which covers
    the MNIST image and label files.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: header shorter than 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise BadMagicError(f"{path}: unsupported element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    if ndim == 0:
        raise BadMagicError(f"{path}: zero-dimensional IDX file")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise TruncatedFileError(
            f"{path}: expected {count} data bytes, found {len(raw) - header}")
    if len(raw) - header > count:
        raise CountMismatchError(
            f"{path}: {len(raw) - header - count} trailing bytes after data")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as an IDX file (gzipped when path ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    payload = struct.pack(">I", 0x0800 | array.ndim)
    payload += struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the file byte-identical across runs
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path):
    """Load an IDX image/label pair as a Dataset with pixels scaled to [0, 1]."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1) / 255.0
    meta = {
        "source": str(images_path),
        "image_shape": list(images.shape[1:]),
        "normalization": "pixel/255",
    }
    return Dataset(features, labels.astype(np.int64), meta)


def save_idx(dataset, images_path, labels_path, image_shape=None):
    """Inverse of :func:`load_idx`; pixels are rounded back to bytes."""
    shape = image_shape or dataset.meta.get("image_shape") or [dataset.features.shape[1]]
    pixels = np.rint(dataset.features * 255.0).astype(np.uint8)
    write_idx(images_path, pixels.reshape(len(dataset), *shape))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def default_data_dir():
    if os.environ.get(DATA_DIR_ENV):
        return Path(os.environ[DATA_DIR_ENV])
    # repository checkout: <root>/data/mnist
    return Path(__file__).resolve().parents[2] / "data" / "mnist"


def load_mnist(data_dir=None):
    """Load the bundled MNIST digits from ``data_dir`` (or the default location)."""
    data_dir = Path(data_dir) if data_dir else default_data_dir()
    images, labels = data_dir / MNIST_IMAGES, data_dir / MNIST_LABELS
    if not images.exists() or not labels.exists():
        raise FileNotFoundError(
            f"MNIST IDX files not found in {data_dir}; run scripts/fetch_mnist.py "
            f"or set {DATA_DIR_ENV}")
    data = load_idx(images, labels)
    data.meta["source"] = "mnist"
    return data


def synthetic_blobs(C, d, n_per_class, spread, seed):
    """Gaussian clusters around seeded random centers in [0.2, 0.8]^d."""
    if C < 2 or d < 1 or n_per_class < 1:
        raise ParameterError("need C >= 2, d >= 1 and n_per_class >= 1")
    if spread < 0:
        raise ParameterError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(C, d))
    labels = np.repeat(np.arange(C), n_per_class)
    noise = rng.standard_normal((C * n_per_class, d)) * spread
    features = np.clip(centers[labels] + noise, 0.0, 1.0)
    meta = {"source": "synthetic_blobs", "C": C, "d": d, "spread": spread,
            "seed": seed, "centers": centers.tolist(), "normalization": "clipped"}
    return Dataset(features, labels, meta)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ParameterError("split fractions must be positive and sum to 1")


def largest_remainder(n, fractions):
    """Integer sizes summing to n, rounded by the largest-remainder method."""
    quotas = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(quotas).astype(np.int64)
    order = np.argsort(-(quotas - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes


def split(data, spec):
    """Seeded shuffle then train/val/test partition.

    If the shuffle leaves a class absent from the training part, one of its
    examples is swapped in for a training example of the most common class.
    """
    sizes = largest_remainder(len(data), (spec.train, spec.val, spec.test))
    if (sizes == 0).any():
        raise ParameterError(f"split of {len(data)} examples yields an empty partition {sizes.tolist()}")
    perm = np.random.default_rng(spec.seed).permutation(len(data))
    n_train = sizes[0]
    labels = data.labels
    for c in np.unique(labels):
        if (labels[perm[:n_train]] == c).any():
            continue
        donor = n_train + int(np.flatnonzero(labels[perm[n_train:]] == c)[0])
        counts = np.bincount(labels[perm[:n_train]])
        receiver = int(np.flatnonzero(labels[perm[:n_train]] == counts.argmax())[-1])
        perm[[donor, receiver]] = perm[[receiver, donor]]
    bounds = np.cumsum(sizes)[:-1]
    parts = np.split(perm, bounds)
    return tuple(data.subset(idx, split=name) for idx, name in zip(parts, ("train", "val", "test")))


def save_dataset(path, data, extra=None):
    """Write the versioned ``.npz`` dataset container."""
    meta = {"version": CONTAINER_VERSION, **data.meta, **(extra or {})}
    with open(path, "wb") as fh:
        np.savez_compressed(fh, features=data.features, labels=data.labels,
                            meta=np.array(json.dumps(meta, sort_keys=True)))


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CONTAINER_VERSION:
            raise ParameterError(f"{path}: unsupported container version {meta.get('version')}")
        return Dataset(z["features"], z["labels"], meta)
