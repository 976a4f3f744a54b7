#!/usr/bin/env python3
"""Convert QuickDraw numpy bitmaps into the IDX files the CLI reads.

Input is a directory of ``full_numpy_bitmap_<class>.npy`` files as published
in the QuickDraw dataset bucket (each an (N, 784) uint8 array of 28x28
drawings). For every class, ``--per-class`` drawings are picked at random
and split ``--train-fraction`` / rest into train and test sets. Labels follow
the order of ``--classes``.

    python scripts/quickdraw_to_idx.py --src ~/quickdraw --out data/quickdraw
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from protovae.data import write_idx_images, write_idx_labels

DEFAULT_CLASSES = "ant,apple,banana,carrot,cat,cow,dog,frog,grapes,lion"


def convert(src, out, classes, per_class, train_fraction, seed):
    rng = np.random.default_rng(seed)
    n_train = int(round(per_class * train_fraction))
    parts = {"train": ([], []), "test": ([], [])}
    for label, name in enumerate(classes):
        path = Path(src) / f"full_numpy_bitmap_{name}.npy"
        bitmaps = np.load(path, mmap_mode="r")
        if bitmaps.ndim != 2 or bitmaps.shape[1] != 784:
            raise ValueError(f"{path}: expected (N, 784) bitmaps, got {bitmaps.shape}")
        if len(bitmaps) < per_class:
            raise ValueError(f"{path}: only {len(bitmaps)} drawings, need {per_class}")
        pick = np.sort(rng.choice(len(bitmaps), size=per_class, replace=False))
        images = np.asarray(bitmaps[pick], dtype=np.uint8).reshape(-1, 28, 28)
        for key, chunk in (("train", images[:n_train]), ("test", images[n_train:])):
            parts[key][0].append(chunk)
            parts[key][1].append(np.full(len(chunk), label, dtype=np.uint8))

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for key, (images, labels) in parts.items():
        images, labels = np.concatenate(images), np.concatenate(labels)
        order = rng.permutation(len(labels))
        write_idx_images(out / f"{key}-images-idx3-ubyte", images[order])
        write_idx_labels(out / f"{key}-labels-idx1-ubyte", labels[order])
        print(f"{key}: {len(labels)} images -> {out}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--src", required=True, help="directory with full_numpy_bitmap_*.npy files")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=DEFAULT_CLASSES)
    p.add_argument("--per-class", type=int, default=10000)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    try:
        convert(args.src, args.out, args.classes.split(","), args.per_class, args.train_fraction, args.seed)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
