"""Write a small MNIST in IDX format from the 5000-sample CSV that ships
inside the mlxtend distribution (500 real digits per class).

    python scripts/make_mnist_subset.py --source path/to/mlxtend-*.whl --out data/mnist

``--source`` may be the wheel, an unpacked mnist_5k.csv.gz, or omitted when
mlxtend is installed. The split is 400 train / 100 test per class, disjoint.
"""
import argparse
import gzip
import importlib.util
import io
import zipfile
from pathlib import Path

import numpy as np

from sensprune.harness.data import MNIST_FILES, write_idx

CSV_IN_WHEEL = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(source):
    if source is None:
        spec = importlib.util.find_spec("mlxtend")
        if spec is None:
            raise SystemExit("mlxtend not installed; pass --source")
        source = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    source = Path(source)
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            raw = z.read(CSV_IN_WHEEL)
    else:
        raw = source.read_bytes()
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    images, labels = read_source(args.source)
    rng = np.random.default_rng(args.seed)
    test_idx = np.sort(np.concatenate([
        rng.choice(np.flatnonzero(labels == c), args.test_per_class, replace=False) for c in range(10)]))
    train_idx = np.setdiff1d(np.arange(len(labels)), test_idx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(out / f"{img_name}.gz", images[idx])
        write_idx(out / f"{lbl_name}.gz", labels[idx])
        print(f"{split}: {len(idx)} samples")


if __name__ == "__main__":
    main()
