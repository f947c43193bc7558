#!/usr/bin/env python3
"""Build the bundled 5,000-image MNIST sample as IDX files.

Source: the `mnist_5k.csv.gz` table shipped inside the mlxtend wheel
(500 images per class drawn from the original MNIST distribution, raw
0-255 pixels, label in the last column).

Split per class: the first 200 images go to the training files and the
remaining 300 to the test files. Images are interleaved by class so that
any prefix is roughly balanced.

Usage:
    pip download --no-deps mlxtend -d /tmp/mlx
    python3 scripts/build_mnist_5k.py /tmp/mlx/mlxtend-*.whl data/mnist-5k
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 200


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        text = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    by_class = {c: [] for c in range(10)}
    for line in text.splitlines():
        fields = [int(float(v)) for v in line.split(",")]
        by_class[fields[-1]].append(bytes(fields[:-1]))

    def interleave(lo, hi):
        rows = []
        for i in range(lo, hi):
            for c in range(10):
                rows.append((by_class[c][i], c))
        return rows

    splits = {
        "train": interleave(0, TRAIN_PER_CLASS),
        "t10k": interleave(TRAIN_PER_CLASS, min(len(v) for v in by_class.values())),
    }
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(rows), 28, 28],
                  b"".join(img for img, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)],
                  bytes(lbl for _, lbl in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
