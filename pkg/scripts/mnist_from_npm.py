#!/usr/bin/env python3
"""Build MNIST IDX files from the npm `mnist` package (cazala/mnist).

That package ships 10,000 real MNIST digits as per-class JSON arrays of
784 floats (pixel/255).  This script reconstructs the original u8 pixels,
makes a stratified seeded train/test split, and writes the four canonical
IDX files so `baddiv prepare-data` can validate them like any MNIST dir.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py --digits-dir package/src/digits --out data/mnist
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from baddiv.data import write_idx_images, write_idx_labels  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--digits-dir", required=True,
                    help="directory with 0.json ... 9.json")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--test-fraction", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    digits_dir = Path(args.digits_dir)
    images, labels = [], []
    for digit in range(10):
        raw = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        arr = np.asarray(raw, dtype=np.float64).reshape(-1, 28, 28)
        pixels = np.round(arr * 255.0).astype(np.uint8)
        images.append(pixels)
        labels.append(np.full(len(pixels), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)

    rng = np.random.default_rng(args.seed)
    test_idx = []
    for digit in range(10):
        members = np.flatnonzero(labels == digit)
        k = int(round(len(members) * args.test_fraction))
        test_idx.append(rng.choice(members, size=k, replace=False))
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[np.concatenate(test_idx)] = True

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": ~test_mask,
        "t10k": test_mask,
    }
    for name, mask in splits.items():
        order = rng.permutation(int(mask.sum()))
        write_idx_images(out / f"{name}-images-idx3-ubyte", images[mask][order])
        write_idx_labels(out / f"{name}-labels-idx1-ubyte", labels[mask][order])
        print(f"{name}: {int(mask.sum())} items")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
