"""Build gzipped MNIST IDX files from the digit subset bundled in the npm `mnist` package.

The package ships 10,000 MNIST digits as JSON arrays of pixel/255 rounded to
three decimals. Pixels are mapped back to bytes with round(v * 255), the
digits are split 80/20 per class into train/test, and each split is shuffled
with a fixed seed.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""

import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">I", magic))
        for d in dims:
            fh.write(struct.pack(">I", d))
        fh.write(payload.astype(np.uint8).tobytes())


def main(src, dst):
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        images = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255)
        cut = int(round(0.8 * len(images)))
        train_x.append(images[:cut])
        train_y.append(np.full(cut, digit))
        test_x.append(images[cut:])
        test_y.append(np.full(len(images) - cut, digit))

    rng = np.random.default_rng(0)
    os.makedirs(dst, exist_ok=True)
    for split, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        perm = rng.permutation(len(y))
        x, y = x[perm], y[perm]
        write_idx(os.path.join(dst, f"{split}-images-idx3-ubyte.gz"), 0x803, (len(y), 28, 28), x)
        write_idx(os.path.join(dst, f"{split}-labels-idx1-ubyte.gz"), 0x801, (len(y),), y)
        print(split, len(y), np.bincount(y))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
