#!/usr/bin/env python3
"""Build gzip-compressed IDX files from the 10,000 MNIST digits bundled in the
npm `mnist` package (https://github.com/cazala/mnist).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist

The digits ship as per-class JSON arrays of intensities divided by 255 and
rounded to three decimals, which is enough to recover the original bytes
exactly. The pool is shuffled with a fixed seed; every fifth image goes to the
held-out `t10k` files (2,000 images), the rest to the `train` files (8,000).
Real MNIST IDX files can be dropped into the same directory instead.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images, rows=28, cols=28):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    pool = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            px = [int(round(v * 255)) for v in data[i : i + 784]]
            assert all(0 <= p <= 255 for p in px)
            pool.append((px, digit))
    random.Random(20210101).shuffle(pool)
    test = [p for i, p in enumerate(pool) if i % 5 == 4]
    train = [p for i, p in enumerate(pool) if i % 5 != 4]
    for name, part in (("train", train), ("t10k", test)):
        write_images(dst / f"{name}-images-idx3-ubyte.gz", [p for p, _ in part])
        write_labels(dst / f"{name}-labels-idx1-ubyte.gz", [l for _, l in part])
        print(name, len(part))


if __name__ == "__main__":
    main()
