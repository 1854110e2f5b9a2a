"""Vendor MNIST and a FashionMNIST evaluation set into data/ as gzipped IDX files.

MNIST comes from the raw IDX files shipped in the ``mnist-data`` npm package.
FashionMNIST comes from the per-class JSON files of the ``fashion-mnist`` npm
package (``src/clothes/<class>.json``, each ``{"data": [[784 ints], ...]}``);
the last 1000 images of every class are kept and interleaved by a fixed
permutation, giving a 10k-image set.

    python3 scripts/prepare_data.py --mnist-dir .../package/data \
        --fashion-dir .../src/clothes --out data
"""

import argparse
import json
import os

import numpy as np

from robust_bnn.data import load_idx_images, load_idx_labels, write_idx_images, write_idx_labels

MNIST_FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]


def vendor_mnist(src, out):
    os.makedirs(out, exist_ok=True)
    for name in MNIST_FILES:
        path = os.path.join(src, name)
        if "images" in name:
            arr = np.rint(load_idx_images(path) * 255).astype(np.uint8)
            write_idx_images(os.path.join(out, name + ".gz"), arr)
        else:
            write_idx_labels(os.path.join(out, name + ".gz"), load_idx_labels(path))


def vendor_fashion(src, out, per_class=1000, seed=0):
    os.makedirs(out, exist_ok=True)
    images, labels = [], []
    for c in range(10):
        with open(os.path.join(src, f"{c}.json")) as fh:
            rows = [r for r in json.load(fh)["data"] if len(r) == 784]
        block = np.array(rows[-per_class:], dtype=np.uint8)
        images.append(block.reshape(-1, 28, 28))
        labels.append(np.full(len(block), c, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    write_idx_images(os.path.join(out, "images-idx3-ubyte.gz"), images[order])
    write_idx_labels(os.path.join(out, "labels-idx1-ubyte.gz"), labels[order])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mnist-dir", required=True)
    ap.add_argument("--fashion-dir", required=True)
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    vendor_mnist(args.mnist_dir, os.path.join(args.out, "mnist"))
    vendor_fashion(args.fashion_dir, os.path.join(args.out, "fashion-mnist"))


if __name__ == "__main__":
    main()
