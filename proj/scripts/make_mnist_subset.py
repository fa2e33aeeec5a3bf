#!/usr/bin/env python3
"""Write the 5000-image MNIST sample bundled with mlxtend as an IDX image file.

Usage: make_mnist_subset.py <mnist_5k.csv.gz> <out-idx3-ubyte>
"""
import gzip
import struct
import sys

import numpy as np


def main() -> None:
    src, dst = sys.argv[1], sys.argv[2]
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    pixels = table[:, :-1].astype(np.uint8)
    n = pixels.shape[0]
    with open(dst, "wb") as out:
        out.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        out.write(pixels.tobytes())


if __name__ == "__main__":
    main()
