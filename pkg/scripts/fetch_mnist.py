"""Put MNIST IDX files into a data directory.

Sources, tried in order:
  1. torchvision's downloader (full 60k/10k MNIST);
  2. the 5,000-image MNIST CSV shipped inside the ``mlxtend`` wheel, fetched
     with ``pip download`` (no install).  It is split, stratified and seeded,
     into 4,000 train / 1,000 test images and written as IDX.
``--csv`` skips straight to a local copy of that CSV (gzip ok; 784 pixel
columns followed by the label).
"""

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from nsad.data import DATA_ENV, MNIST_FILES, data_dir, write_idx

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def from_torchvision(out: Path) -> bool:
    try:
        from torchvision.datasets import MNIST
    except ImportError:
        return False
    with tempfile.TemporaryDirectory() as tmp:
        try:
            MNIST(tmp, train=True, download=True)
            MNIST(tmp, train=False, download=True)
        except Exception as e:  # no network, mirror down...
            print(f"torchvision download failed: {e}", file=sys.stderr)
            return False
        raw = Path(tmp) / "MNIST" / "raw"
        for stems in MNIST_FILES.values():
            for s in stems:
                (out / (s + ".gz")).write_bytes(gzip.compress((raw / s).read_bytes(), mtime=0))
    return True


def csv_from_wheel() -> bytes | None:
    with tempfile.TemporaryDirectory() as tmp:
        cmd = [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp, "-q"]
        if subprocess.run(cmd).returncode != 0:
            return None
        wheels = list(Path(tmp).glob("mlxtend-*.whl"))
        if not wheels:
            return None
        with zipfile.ZipFile(wheels[0]) as z:
            return z.read(CSV_MEMBER)


def split_csv(blob: bytes, out: Path, test_per_class: int, seed: int):
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    table = np.loadtxt(io.BytesIO(blob), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :784].astype(np.uint8), table[:, 784].astype(np.uint8)
    rng = np.random.default_rng(seed)
    test = np.concatenate([rng.choice(np.flatnonzero(labels == c), test_per_class, replace=False)
                           for c in range(10)])
    train = np.setdiff1d(np.arange(len(labels)), test)
    for split, idx in (("train", rng.permutation(train)), ("test", rng.permutation(test))):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / (img_name + ".gz"), pixels[idx].reshape(-1, 28, 28))
        write_idx(out / (lab_name + ".gz"), labels[idx])
        print(f"{split}: {len(idx)} images")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=None, help=f"target directory (default ${DATA_ENV} or ./data)")
    ap.add_argument("--csv", default=None, help="local MNIST CSV to convert instead of downloading")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-torchvision", action="store_true")
    args = ap.parse_args(argv)

    out = data_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.csv:
        split_csv(Path(args.csv).read_bytes(), out, args.test_per_class, args.seed)
    elif not args.no_torchvision and from_torchvision(out):
        print("full MNIST written")
    else:
        blob = csv_from_wheel()
        if blob is None:
            sys.exit("could not obtain MNIST: no network access to torchvision mirrors or PyPI")
        split_csv(blob, out, args.test_per_class, args.seed)
    print(f"IDX files in {out.resolve()}")


if __name__ == "__main__":
    main()
