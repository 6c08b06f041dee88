"""Write MNIST as gzipped IDX files into ``$REVGN_DATA_DIR/mnist``.

The raw files come from the ``mnist_hub`` wheel on PyPI, which bundles the
classic ``mnist.pkl.gz`` (50k train / 10k valid / 10k test, pixels stored as
byte/256).  Train and valid are concatenated back into the 60k training split.

    python scripts/fetch_mnist.py [--out DIR] [--pkl PATH]
"""
import argparse
import gzip
import os
import pickle
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np


def _download_pkl(workdir):
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", workdir, "mnist_hub==0.1.4"],
        check=True,
    )
    wheel = next(Path(workdir).glob("mnist_hub-*.whl"))
    with zipfile.ZipFile(wheel) as zf:
        data = zf.read("mnist/data/mnist.pkl.gz")
    out = Path(workdir) / "mnist.pkl.gz"
    out.write_bytes(data)
    return out


def _write_idx(path, arr, magic):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(struct.pack(">I", magic))
        for dim in arr.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(arr.astype(np.uint8).tobytes())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    default_root = os.environ.get("REVGN_DATA_DIR", "data")
    parser.add_argument("--out", default=os.path.join(default_root, "mnist"))
    parser.add_argument("--pkl", default=None, help="use an existing mnist.pkl.gz")
    args = parser.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        pkl = Path(args.pkl) if args.pkl else _download_pkl(tmp)
        with gzip.open(pkl, "rb") as fh:
            train, valid, test = pickle.load(fh, encoding="latin1")

    def to_bytes(x):
        return np.rint(x.astype(np.float64) * 256.0).clip(0, 255).astype(np.uint8)

    x_train = np.concatenate([to_bytes(train[0]), to_bytes(valid[0])]).reshape(-1, 28, 28)
    y_train = np.concatenate([train[1], valid[1]]).astype(np.uint8)
    x_test = to_bytes(test[0]).reshape(-1, 28, 28)
    y_test = test[1].astype(np.uint8)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_idx(out / "train-images-idx3-ubyte.gz", x_train, 0x00000803)
    _write_idx(out / "train-labels-idx1-ubyte.gz", y_train, 0x00000801)
    _write_idx(out / "t10k-images-idx3-ubyte.gz", x_test, 0x00000803)
    _write_idx(out / "t10k-labels-idx1-ubyte.gz", y_test, 0x00000801)
    print(f"wrote {len(y_train)} train / {len(y_test)} test images to {out}")


if __name__ == "__main__":
    main()
