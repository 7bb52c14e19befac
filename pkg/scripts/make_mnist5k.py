"""Write the 5,000-image MNIST subset shipped with mlxtend as IDX files.

Usage: python scripts/make_mnist5k.py path/to/mnist_5k.csv.gz data/mnist-5k

Per class, the first 400 images go to the training split and the remaining
100 to the evaluation split (4,000 / 1,000 overall).
"""

import sys
from pathlib import Path

import numpy as np

from cwhawq.data import MNIST_FILES, write_idx_images, write_idx_labels


def main(csv_path, out_dir):
    table = np.loadtxt(csv_path, delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].reshape(-1, 28, 28), table[:, -1]
    train, held = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train.extend(idx[:400])
        held.extend(idx[400:])
    train, held = np.sort(train), np.sort(held)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / (MNIST_FILES["train_images"] + ".gz"), images[train], compress=True)
    write_idx_labels(out / (MNIST_FILES["train_labels"] + ".gz"), labels[train], compress=True)
    write_idx_images(out / (MNIST_FILES["eval_images"] + ".gz"), images[held], compress=True)
    write_idx_labels(out / (MNIST_FILES["eval_labels"] + ".gz"), labels[held], compress=True)
    print(f"train {len(train)}  eval {len(held)}  -> {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
