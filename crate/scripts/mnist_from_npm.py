"""Build gzipped IDX files from the digit JSON bundled in the `mnist` npm package.

The package ships 10,000 MNIST digits as per-class arrays of 784 floats in
[0, 1] (three decimals). The last 100 digits of each class form the test
split; the remaining 9,000 are shuffled with a fixed seed into the train split.

usage: python3 scripts/mnist_from_npm.py PACKAGE_DIR OUT_DIR
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28
TEST_PER_CLASS = 100


def load_class(package: Path, digit: int):
    flat = json.loads((package / "src" / "digits" / f"{digit}.json").read_text())["data"]
    assert len(flat) % PIXELS == 0
    return [
        bytes(round(v * 255) for v in flat[i : i + PIXELS])
        for i in range(0, len(flat), PIXELS)
    ]


def write_images(path: Path, images):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_labels(path: Path, labels):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    package, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        images = load_class(package, digit)
        train += [(img, digit) for img in images[:-TEST_PER_CLASS]]
        test += [(img, digit) for img in images[-TEST_PER_CLASS:]]
    random.Random(0).shuffle(train)
    random.Random(1).shuffle(test)
    for name, rows in (("train", train), ("t10k", test)):
        write_images(out / f"{name}-images-idx3-ubyte.gz", [r[0] for r in rows])
        write_labels(out / f"{name}-labels-idx1-ubyte.gz", [r[1] for r in rows])
        print(f"{name}: {len(rows)} digits")


if __name__ == "__main__":
    main()
