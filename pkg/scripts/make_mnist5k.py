"""Rebuild data/mnist5k from the 5,000-digit MNIST sample shipped in the mlxtend wheel.

Usage: python3 scripts/make_mnist5k.py path/to/mlxtend-<ver>-py3-none-any.whl [outdir]

The sample holds 500 digits per class.  A fixed seed splits each class into
400 training and 100 test digits; both splits are then shuffled with the same
seed.  Output is gzipped IDX (standard MNIST file names) plus a MANIFEST with
sha-256 digests.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from spikecodec.data import write_idx, write_manifest

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
SEED = 20240229
TEST_PER_CLASS = 100


def main(wheel, outdir="data/mnist5k"):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode("ascii")
    table = np.loadtxt(io.StringIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(SEED)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        test_idx.append(idx[:TEST_PER_CLASS])
        train_idx.append(idx[TEST_PER_CLASS:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "train_images": out / "train-images-idx3-ubyte.gz",
        "train_labels": out / "train-labels-idx1-ubyte.gz",
        "test_images": out / "t10k-images-idx3-ubyte.gz",
        "test_labels": out / "t10k-labels-idx1-ubyte.gz",
    }
    write_idx(files["train_images"], images[train_idx])
    write_idx(files["train_labels"], labels[train_idx])
    write_idx(files["test_images"], images[test_idx])
    write_idx(files["test_labels"], labels[test_idx])
    write_manifest(out / "MANIFEST", files)
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
