#!/usr/bin/env python3
"""Build a class-balanced MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as normalized JSON arrays. This
script takes `--per-class` digits of each class, shuffles them with a fixed
seed and writes big-endian IDX files (magic 0x803 / 0x801).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist
"""
import argparse
import json
import random
import struct
from pathlib import Path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--per-class", type=int, default=600)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        flat = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        count = len(flat) // 784
        if count < args.per_class:
            raise SystemExit(f"digit {digit}: only {count} samples")
        for i in range(args.per_class):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            samples.append((pixels, digit))
    random.Random(args.seed).shuffle(samples)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(args.out_dir / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} samples to {args.out_dir}")


if __name__ == "__main__":
    main()
