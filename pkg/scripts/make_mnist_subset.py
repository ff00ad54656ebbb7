"""Write the MNIST subset used by the desk experiments as gzipped IDX files.

Source: the 5,000-image MNIST sample bundled with mlxtend (500 per class,
stored sorted by label). Records are shuffled with a fixed seed, then split
into 4,000 train / 1,000 test records.

    python scripts/make_mnist_subset.py --out data/mnist5k
"""
import argparse
import gzip
import os
from pathlib import Path

import numpy as np

from xrl.data import write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--csv", default=None, help="path to mnist_5k.csv.gz (default: mlxtend's copy)")
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()

    path = args.csv
    if path is None:
        import mlxtend

        path = os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")
    table = np.loadtxt(gzip.open(path), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images_u8=images[:4000])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels=labels[:4000])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images_u8=images[4000:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels=labels[4000:])
    print(f"wrote {out} (4000 train / {len(labels) - 4000} test)")


if __name__ == "__main__":
    main()
