"""IDX files, MNIST loading, desk-scale subsets and synthetic tied-pixel images."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .precision import Precision

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {v.newbyteorder("="): k for k, v in IDX_TYPES.items()}

DATA_ENV = "NSAD_DATA_DIR"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """Malformed IDX content; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(RuntimeError):
    pass


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"file too short for the magic number: {len(buf)} bytes", len(buf))
    zero, code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0:
        raise IdxFormatError(f"bad magic 0x{buf[:4].hex()}: first two bytes must be zero", 0)
    if code not in IDX_TYPES:
        raise IdxFormatError(f"bad magic 0x{buf[:4].hex()}: unknown type code 0x{code:02x}", 2)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxFormatError(f"header needs {head} bytes for {ndim} dims, file has {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    dt = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    actual = len(buf) - head
    if actual != expected:
        what = "truncated" if actual < expected else "trailing bytes"
        raise IdxFormatError(
            f"{what}: dims {dims} need {expected} data bytes, found {actual}", head + min(actual, expected))
    return np.frombuffer(buf, dtype=dt, offset=head).reshape(dims).astype(dt.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) into an array."""
    with _open(path) as f:
        return parse_idx(f.read())


def write_idx(path, array, compress: bool | None = None):
    array = np.asarray(array)
    code = _TYPE_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"dtype {array.dtype} has no IDX type code")
    out = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    out += array.astype(IDX_TYPES[code]).tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.parent.mkdir(parents=True, exist_ok=True)
    if compress:
        # no name and mtime=0 keep the bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
            f.write(out)
    else:
        path.write_bytes(out)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    split: str = ""
    classes: int = 10

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def take(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split if split is None else split, self.classes)

    def astype(self, precision) -> "Dataset":
        return Dataset(self.images.astype(Precision.parse(precision).dtype), self.labels, self.split, self.classes)


def load_idx(images_path, labels_path=None, precision=Precision.B32, normalize: str = "unit",
             split: str = "") -> Dataset:
    """Images scaled by 1/255 (``normalize="unit"``) or standardised (``"standard"``).

    Standardisation uses the dataset's own mean and std; it breaks the exact
    pixel ties of flat regions, which is why it is off by default.
    """
    raw = read_idx(images_path)
    if raw.ndim == 3:
        raw = raw[:, None]
    if raw.ndim != 4:
        raise IdxFormatError(f"expected 3 or 4 image dims, got {raw.ndim}", 3)
    x = raw.astype(np.float64) / 255.0
    if normalize == "standard":
        x = (x - x.mean()) / x.std()
    elif normalize != "unit":
        raise ValueError(f"unknown normalisation {normalize!r}")
    x = x.astype(Precision.parse(precision).dtype)
    if labels_path is None:
        y = np.zeros(len(x), dtype=np.int64)
    else:
        y = read_idx(labels_path).astype(np.int64)
    return Dataset(x, y, split)


def data_dir(path=None) -> Path:
    return Path(path or os.environ.get(DATA_ENV) or "data")


def _find(base: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (base / name).exists():
            return base / name
    return None


def load_mnist(split: str = "train", path=None, precision=Precision.B32, normalize: str = "unit") -> Dataset:
    base = data_dir(path)
    stems = MNIST_FILES[split]
    files = [_find(base, s) for s in stems]
    if None in files:
        raise DataError(
            f"MNIST {split} files not found in {base.resolve()} (looked for {', '.join(stems)} with "
            f"optional .gz). Run `python scripts/fetch_mnist.py --out {base}` or point ${DATA_ENV} "
            "at a directory holding the IDX files.")
    return load_idx(files[0], files[1], precision, normalize, split)


def stratified_subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """``n`` examples with class counts proportional to ``ds`` (largest remainder), shuffled."""
    if not 0 < n <= len(ds):
        raise ValueError(f"subset size {n} outside (0, {len(ds)}]")
    rng = np.random.default_rng(seed)
    counts = np.bincount(ds.labels, minlength=ds.classes)
    exact = n * counts / counts.sum()
    quota = np.floor(exact).astype(int)
    for c in np.argsort(-(exact - quota), kind="stable")[: n - quota.sum()]:
        quota[c] += 1
    picks = [rng.choice(np.flatnonzero(ds.labels == c), quota[c], replace=False) for c in range(ds.classes)]
    idx = rng.permutation(np.concatenate(picks))
    return ds.take(idx)


def batches(ds: Dataset, batch_size: int, drop_last: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    n = len(ds)
    stop = n - n % batch_size if drop_last else n
    return [(ds.images[s:s + batch_size], ds.labels[s:s + batch_size])
            for s in range(0, stop, batch_size)]


# -- synthetic tied images --------------------------------------------------

def count_tied_windows(images: np.ndarray, m: int = 2, n: int = 2) -> int:
    """Brute force: windows of every map holding a repeated maximum."""
    total = 0
    *_, h, w = images.shape
    maps = images.reshape(-1, h, w)
    for img in maps:
        for i in range(0, h - h % m, m):
            for j in range(0, w - w % n, n):
                win = img[i:i + m, j:j + n].ravel()
                total += int(np.sum(win == win.max()) > 1)
    return total


def synth_tied(count: int, tie_fraction: float, size: int = 28, seed: int = 0, classes: int = 10) -> Dataset:
    """Ramp images in which a chosen share of 2x2 windows is made constant.

    The ramp is strictly increasing in row-major order, so untouched windows
    have a unique maximum; with a unit 1x1 kernel the first conv layer passes
    the ties straight to the first pooling layer.  ``tie_fraction = 1`` gives
    every window flat.
    """
    if not 0.0 <= tie_fraction <= 1.0:
        raise ValueError(f"tie_fraction must lie in [0, 1], got {tie_fraction}")
    rng = np.random.default_rng(seed)
    nwin = (size // 2) ** 2
    k = math.ceil(tie_fraction * nwin)
    ramp = np.arange(size * size, dtype=np.float64).reshape(size, size) / (size * size)
    images = np.empty((count, 1, size, size))
    for i in range(count):
        img = ramp * rng.uniform(0.5, 0.75) + rng.uniform(0.0, 0.25)
        for w in rng.choice(nwin, k, replace=False):
            r, c = divmod(int(w), size // 2)
            img[2 * r:2 * r + 2, 2 * c:2 * c + 2] = img[2 * r, 2 * c]
        images[i, 0] = img
    return Dataset(images, rng.integers(0, classes, count), "synthetic", classes)
