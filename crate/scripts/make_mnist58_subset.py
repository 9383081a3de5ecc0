"""Cut the digits-5-vs-8 subset shipped in data/mnist58 out of the full MNIST IDX files.

Usage: python3 scripts/make_mnist58_subset.py <mnist_dir> <out_dir>

Keeps the original digit labels and the original file order; takes the first
TRAIN_PER_CLASS training images and TEST_PER_CLASS test images of each digit.
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np

CLASSES = (5, 8)
TRAIN_PER_CLASS = 1111
TEST_PER_CLASS = 500


def read_idx(path):
    raw = Path(path).read_bytes()
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = magic & 0xFF
    dims = struct.unpack(">" + "I" * ndim, raw[4 : 4 + 4 * ndim])
    return magic, np.frombuffer(raw[4 + 4 * ndim :], dtype=np.uint8).reshape(dims)


def write_idx(path, magic, arr):
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def subset(images, labels, per_class):
    keep = []
    for c in CLASSES:
        keep.extend(np.flatnonzero(labels == c)[:per_class].tolist())
    keep.sort()
    return images[keep], labels[keep]


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for split, per_class in (("train", TRAIN_PER_CLASS), ("t10k", TEST_PER_CLASS)):
        _, images = read_idx(src / f"{split}-images-idx3-ubyte")
        _, labels = read_idx(src / f"{split}-labels-idx1-ubyte")
        images, labels = subset(images, labels, per_class)
        write_idx(dst / f"{split}-images-idx3-ubyte.gz", 0x00000803, images)
        write_idx(dst / f"{split}-labels-idx1-ubyte.gz", 0x00000801, labels)
        print(split, images.shape, np.bincount(labels)[list(CLASSES)])


if __name__ == "__main__":
    main(*sys.argv[1:3])
