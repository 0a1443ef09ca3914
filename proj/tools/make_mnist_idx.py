#!/usr/bin/env python3
"""Convert the npm `mnist` package digit JSONs into IDX files.

The npm package (https://www.npmjs.com/package/mnist) ships the MNIST
training digits as per-class JSON arrays of floats in [0,1], each value
being pixel_byte/255 rounded to 3 decimals. round(v*255) recovers the
original byte exactly, so the emitted IDX files are byte-identical to a
subset of the canonical MNIST training set.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_idx.py package/src/digits data/mnist --per-class 200

Output: <out>/images-idx3-ubyte and <out>/labels-idx1-ubyte with a
balanced, class-interleaved sample order (any prefix is roughly balanced).
"""

import argparse
import json
import os
import struct
import sys


def load_class(digits_dir: str, label: int):
    with open(os.path.join(digits_dir, f"{label}.json")) as f:
        payload = json.load(f)
    flat = payload["data"] if isinstance(payload, dict) else payload
    assert len(flat) % 784 == 0, f"class {label}: length {len(flat)} not a multiple of 784"
    images = []
    for i in range(len(flat) // 784):
        px = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
        images.append(px)
    return images


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", help="path to the npm package's src/digits directory")
    ap.add_argument("out_dir")
    ap.add_argument("--per-class", type=int, default=200)
    args = ap.parse_args()

    classes = [load_class(args.digits_dir, c) for c in range(10)]
    for c, imgs in enumerate(classes):
        if len(imgs) < args.per_class:
            sys.exit(f"class {c} has only {len(imgs)} images, need {args.per_class}")

    os.makedirs(args.out_dir, exist_ok=True)
    n = args.per_class * 10
    with open(os.path.join(args.out_dir, "images-idx3-ubyte"), "wb") as fi, \
         open(os.path.join(args.out_dir, "labels-idx1-ubyte"), "wb") as fl:
        fi.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fl.write(struct.pack(">II", 0x00000801, n))
        for i in range(args.per_class):
            for c in range(10):
                fi.write(classes[c][i])
                fl.write(bytes([c]))
    print(f"wrote {n} images to {args.out_dir}")


if __name__ == "__main__":
    main()
