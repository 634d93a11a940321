#!/usr/bin/env python3
"""Convert the digit subset shipped in the `mnist` npm package (10,000 MNIST
digits stored as JSON arrays of byte/255 values rounded to 3 decimals) into
gzip-compressed IDX files.

Usage:
    curl -sO https://registry.npmjs.org/mnist/-/mnist-1.1.0.tgz
    tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist10k

Digits are interleaved class by class (0,1,...,9,0,1,...) so any prefix of the
file is roughly class balanced.
"""
import gzip
import json
import os
import struct
import sys

SIZE = 28 * 28


def main(src, dst):
    per_class = []
    for d in range(10):
        with open(os.path.join(src, f"{d}.json")) as fh:
            raw = json.load(fh)["data"]
        n = len(raw) // SIZE
        imgs = [bytes(int(round(v * 255)) for v in raw[i * SIZE:(i + 1) * SIZE]) for i in range(n)]
        per_class.append(imgs)
    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for i in range(longest):
        for d in range(10):
            if i < len(per_class[d]):
                images.append(per_class[d][i])
                labels.append(d)
    os.makedirs(dst, exist_ok=True)
    with gzip.GzipFile(os.path.join(dst, "images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            fh.write(img)
    with gzip.GzipFile(os.path.join(dst, "labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, len(labels)))
        fh.write(bytes(labels))
    print(f"wrote {len(images)} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
