#!/usr/bin/env python3
"""Convert the digit subset bundled in the `mnist` npm package into the
canonical gzipped IDX archives (train-*-ubyte.gz / t10k-*-ubyte.gz).

usage: mnist_from_npm.py <npm package dir> <output dir> [test fraction]
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src = Path(sys.argv[1]) / "src" / "digits"
    out = Path(sys.argv[2])
    test_frac = float(sys.argv[3]) if len(sys.argv) > 3 else 0.2
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = json.load(open(src / f"{digit}.json"))["data"]
        n = len(raw) // 784
        n_test = int(round(n * test_frac))
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            key = "t10k" if i >= n - n_test else "train"
            splits[key][0].append(px)
            splits[key][1].append(digit)
    for key, (imgs, labels) in splits.items():
        write_idx(out / f"{key}-images-idx3-ubyte.gz", 0x803, [len(imgs), 28, 28], b"".join(imgs))
        write_idx(out / f"{key}-labels-idx1-ubyte.gz", 0x801, [len(labels)], bytes(labels))
        print(key, len(imgs))


if __name__ == "__main__":
    main()
