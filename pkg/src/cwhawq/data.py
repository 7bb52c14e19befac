"""Datasets: MNIST IDX ingestion and seeded Gaussian-blob generation."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .rng import substream

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "eval_images": "t10k-images-idx3-ubyte",
    "eval_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    num_classes: int

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])

    def subset(self, n_train=None, n_eval=None, seed=0):
        """Deterministic random subset of each split (used for cheap rewards)."""
        rng = substream(seed, "subset")
        def pick(x, y, n):
            if n is None or n >= len(x):
                return x, y
            idx = np.sort(rng.permutation(len(x))[:n])
            return x[idx], y[idx]
        tx, ty = pick(self.train_x, self.train_y, n_train)
        ex, ey = pick(self.eval_x, self.eval_y, n_eval)
        return Dataset(self.name, tx, ty, ex, ey, self.num_classes)


def gen_synthetic(seed, classes=10, n=2000, dim=16, separation=6.0, sigma=1.0):
    """Class-balanced isotropic Gaussian blobs with an 80/20 train/eval split.

    Class centres lie on orthonormal directions at distance ``separation * sigma``
    from the origin, so any two centres are ``sqrt(2) * separation * sigma`` apart.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < classes:
        raise ValueError("need at least one sample per class")
    if classes > dim:
        raise ValueError("classes must not exceed dim")
    rng = substream(seed, "synthetic")
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    centres = q[:classes] * (separation * sigma)
    labels = np.arange(n) % classes
    x = centres[labels] + rng.normal(0.0, sigma, size=(n, dim))
    order = rng.permutation(n)
    x, labels = x[order], labels[order]
    if n == classes:
        log.warning("one sample per class: eval split duplicates the training set")
        return Dataset("synthetic", x, labels, x.copy(), labels.copy(), classes)
    # stratified 80/20 split keeps both splits class-balanced
    eval_mask = np.zeros(n, dtype=bool)
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        k = len(idx) // 5
        eval_mask[idx[len(idx) - k:]] = True
    return Dataset("synthetic", x[~eval_mask], labels[~eval_mask],
                   x[eval_mask], labels[eval_mask], classes)


def _open(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise DataFormatError("missing IDX file", path=path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw, path


def read_idx_images(path):
    raw, path = _open(path)
    if len(raw) < 16:
        raise DataFormatError("truncated image header", offset=len(raw), path=path)
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x}", offset=0, path=path)
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataFormatError("truncated image data", offset=len(raw), path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path):
    raw, path = _open(path)
    if len(raw) < 8:
        raise DataFormatError("truncated label header", offset=len(raw), path=path)
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{magic:08x}", offset=0, path=path)
    if len(raw) < 8 + n:
        raise DataFormatError("truncated label data", offset=len(raw), path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def write_idx_images(path, images, compress=False):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    raw = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    _write(path, raw, compress)


def write_idx_labels(path, labels, compress=False):
    labels = np.asarray(labels, dtype=np.uint8)
    raw = struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes()
    _write(path, raw, compress)


def _write(path, raw, compress):
    path = Path(path)
    if compress:
        # mtime=0 keeps the archive byte-reproducible
        raw = gzip.compress(raw, mtime=0)
    path.write_bytes(raw)


def ingest_mnist(directory):
    """Load the four MNIST IDX files (optionally gzipped) from ``directory``.

    Images become float64 arrays of shape (N, 1, 28, 28) scaled to [0, 1].
    """
    d = Path(directory)
    arrays = {}
    for key, fname in MNIST_FILES.items():
        reader = read_idx_images if key.endswith("images") else read_idx_labels
        arrays[key] = reader(d / fname)
    for split in ("train", "eval"):
        imgs, labels = arrays[f"{split}_images"], arrays[f"{split}_labels"]
        if len(imgs) != len(labels):
            raise DataFormatError(f"{split}: {len(imgs)} images but {len(labels)} labels", path=d)
        if labels.size and labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(f"{split}: label {labels[bad]} out of range", offset=8 + bad,
                                  path=d / MNIST_FILES[f"{split}_labels"])
    def prep(imgs):
        return (imgs.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset("mnist", prep(arrays["train_images"]), arrays["train_labels"].astype(np.int64),
                   prep(arrays["eval_images"]), arrays["eval_labels"].astype(np.int64), 10)


def load_dataset(name, seed=0, mnist_dir=None, **kwargs):
    if name == "mnist":
        if mnist_dir is None:
            raise ValueError("mnist dataset needs a directory")
        return ingest_mnist(mnist_dir)
    if name == "synthetic":
        return gen_synthetic(seed, **kwargs)
    raise ValueError(f"unknown dataset {name!r}")
