#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist, v1.1.0) ships 10,000
MNIST digits as JSON arrays of pixel intensities scaled to [0, 1] and rounded
to three decimals. Multiplying by 255 and rounding recovers the original bytes
exactly. Digits are grouped by class in the package, so they are shuffled with
a fixed seed before being split into train/test files.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/build_desk_mnist.py package/src/digits data/mnist-desk
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 4000
TEST = 1000
SEED = 20240917


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            px = [int(round(v * 255)) for v in flat[i : i + 784]]
            assert all(0 <= p <= 255 for p in px)
            samples.append((px, digit))
    random.Random(SEED).shuffle(samples)
    train, test = samples[:TRAIN], samples[TRAIN : TRAIN + TEST]
    write_images(dst / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(dst / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(dst / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {dst}")


if __name__ == "__main__":
    main()
