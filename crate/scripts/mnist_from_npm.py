#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Writes `mnist-10k-images-idx3-ubyte` and `mnist-10k-labels-idx1-ubyte`
(28x28 u8 images, class-major order).
"""
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, dst: Path) -> None:
    images = bytearray()
    labels = bytearray()
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        images.extend(min(255, max(0, round(v * 255))) for v in raw[: count * SIDE * SIDE])
        labels.extend([digit] * count)
    n = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "mnist-10k-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x803, n, SIDE, SIDE) + bytes(images)
    )
    (dst / "mnist-10k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(Path(sys.argv[1]), Path(sys.argv[2]))
