#!/usr/bin/env python3
"""Build a small MNIST set in IDX format from the 5,000-image sample that
ships inside the mlxtend wheel (mlxtend/data/data/mnist_5k.csv.gz).

The sample is sorted by class, so it is shuffled with a fixed seed and split
into 4,000 training and 1,000 test images.

    pip download --no-deps mlxtend
    python3 scripts/make_desk_mnist.py mlxtend-*.whl data/mnist-desk
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np

SEED = 20240
N_TRAIN = 4000


def write_idx(path, images, labels_path, labels):
    n = images.shape[0]
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(labels_path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    wheel, out = sys.argv[1], sys.argv[2]
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    images, labels = table[:, :-1], table[:, -1]
    perm = np.random.RandomState(SEED).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    write_idx(f"{out}/train-images-idx3-ubyte.gz", images[:N_TRAIN],
              f"{out}/train-labels-idx1-ubyte.gz", labels[:N_TRAIN])
    write_idx(f"{out}/t10k-images-idx3-ubyte.gz", images[N_TRAIN:],
              f"{out}/t10k-labels-idx1-ubyte.gz", labels[N_TRAIN:])


if __name__ == "__main__":
    main()
