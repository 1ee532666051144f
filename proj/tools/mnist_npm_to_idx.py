#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package to IDX files.

The package stores 28x28 MNIST digits as byte/255 values rounded to three
decimals, which is precise enough to recover every original byte exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_npm_to_idx.py package/src/digits data/mnist
"""
import argparse
import json
import pathlib
import struct


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("digits_dir", type=pathlib.Path)
    parser.add_argument("out_dir", type=pathlib.Path)
    args = parser.parse_args()

    images = bytearray()
    labels = bytearray()
    for label in range(10):
        values = json.loads((args.digits_dir / f"{label}.json").read_text())["data"]
        if len(values) % 784:
            raise SystemExit(f"{label}.json: length {len(values)} is not a multiple of 784")
        images.extend(min(255, max(0, round(v * 255))) for v in values)
        labels.extend([label] * (len(values) // 784))

    count = len(labels)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x00000803, count, 28, 28) + bytes(images))
    (args.out_dir / "train-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x00000801, count) + bytes(labels))
    print(f"wrote {count} digits to {args.out_dir}")


if __name__ == "__main__":
    main()
