#!/usr/bin/env python3
"""Build the bundled desk-scale MNIST split under data/mnist5k/.

Source: the 5,000-image MNIST subset (500 per class) shipped inside the
mlxtend wheel, fetched with ``pip download`` so no dataset host is needed.
Split per class with a fixed permutation: 400 train / 100 test.

    python scripts/fetch_mnist_subset.py [--out data/mnist5k] [--wheel path.whl]
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

from logitcorrect.storage import atomic_write, encode_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                    "-d", str(dest), "mlxtend==0.24.0"], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--wheel", default=None, help="use an already downloaded mlxtend wheel")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = Path(args.wheel) if args.wheel else fetch_wheel(Path(tmp))
        raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_idx.append(idx[:args.test_per_class])
        train_idx.append(idx[args.test_per_class:])
    out = Path(args.out)
    for name, parts in (("train", train_idx), ("test", test_idx)):
        idx = np.sort(np.concatenate(parts))
        idx = idx[rng.permutation(len(idx))]  # interleave classes
        imgs = pixels[idx].reshape(-1, 28, 28)
        for kind, arr in (("images", imgs), ("labels", labels[idx])):
            blob = gzip.compress(encode_idx(arr), mtime=0)
            atomic_write(out / f"{name}-{kind}.idx.gz", blob)
        print(f"{name}: {len(idx)} examples -> {out}")


if __name__ == "__main__":
    main()
