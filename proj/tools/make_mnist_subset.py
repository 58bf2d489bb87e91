#!/usr/bin/env python3
"""Write the first N samples of mlxtend's bundled 5k MNIST subset as IDX files.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out_dir> [N]
"""
import gzip
import struct
import sys

import numpy as np


def main():
    src, out_dir = sys.argv[1], sys.argv[2]
    n = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    # The 5k file is ordered by class; spread the subset evenly over it.
    idx = np.linspace(0, len(table) - 1, n).round().astype(int)
    rows = table[idx]
    images = rows[:, :-1].astype(np.uint8)
    labels = rows[:, -1].astype(np.uint8)
    with open(f"{out_dir}/mnist2k-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(images.tobytes())
    with open(f"{out_dir}/mnist2k-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(labels.tobytes())
    print(n, np.bincount(labels, minlength=10))


if __name__ == "__main__":
    main()
