#!/usr/bin/env python3
"""Build a 10k-image MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON arrays of pixel
intensities in [0, 1]. This script re-quantizes them to bytes, shuffles
with a fixed seed, and writes an 8000/2000 train/test split using the
standard IDX file names.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist10k_from_npm.py package/src/digits /root/data/mnist10k
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + 784]]
            samples.append((px, digit))
    random.Random(20240611).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(dst / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {dst}")


if __name__ == "__main__":
    main()
