"""Dataset loading, preprocessing and seeded batching.

Datasets hold inputs column-per-sample as a ``(d, N)`` float64 matrix.  Inputs
with an odd feature count get one trailing zero row so the width splits into
two equal halves; ``meta["padded"]`` records this.
"""
from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .linalg import check_finite

CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    """A dataset file is malformed or truncated."""


@dataclass
class Dataset:
    x: np.ndarray
    targets: np.ndarray
    name: str
    d_y: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] % 2:
            raise ValueError(f"inputs must be (even d, N), got {self.x.shape}")
        if self.x.shape[1] < 1:
            raise ValueError("empty dataset")
        if len(self.targets.shape) == 1:
            if self.targets.shape[0] != self.x.shape[1]:
                raise ValueError("label count does not match sample count")
        elif self.targets.shape[1] != self.x.shape[1]:
            raise ValueError("target count does not match sample count")
        check_finite(self.x, f"{self.name} inputs")

    @property
    def d(self):
        return self.x.shape[0]

    @property
    def n_samples(self):
        return self.x.shape[1]

    @property
    def is_classification(self):
        return self.targets.ndim == 1

    def take(self, idx):
        idx = np.asarray(idx)
        y = self.targets[idx] if self.is_classification else self.targets[:, idx]
        return self.x[:, idx], y

    def select(self, idx):
        x, y = self.take(idx)
        return replace(self, x=x, targets=y, meta=dict(self.meta))


def pad_even(x):
    """Append a zero row when the row count is odd; returns ``(x, padded)``."""
    if x.shape[0] % 2 == 0:
        return x, False
    return np.vstack([x, np.zeros((1, x.shape[1]))]), True


def _open_maybe_gz(path):
    path = Path(path)
    if path.exists():
        raw = path.read_bytes()
    elif path.with_name(path.name + ".gz").exists():
        raw = path.with_name(path.name + ".gz").read_bytes()
    else:
        raise FileNotFoundError(path)
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic):
    """Parse a big-endian IDX file into a uint8 array."""
    raw = _open_maybe_gz(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist(directory):
    """MNIST train/test splits from the four standard IDX files (gzip optional).

    Pixels are scaled to [0, 1]; ``d = 784``, ``d_y = 10``.
    """
    directory = Path(directory)
    out = []
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx(directory / f"{prefix}-images-idx3-ubyte", 0x00000803)
        labels = read_idx(directory / f"{prefix}-labels-idx1-ubyte", 0x00000801)
        if images.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"{split}: {images.shape[0]} images but {labels.shape[0]} labels")
        x = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
        x, padded = pad_even(x)
        out.append(Dataset(x, labels.astype(np.int64), "mnist", 10, split,
                           {"padded": padded, "normalization": "unit-interval"}))
    return tuple(out)


def _read_cifar_batch(path):
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte out of range")
    return rec[:, 1:].T.astype(np.float64) / 255.0, labels


def load_cifar10(directory):
    """CIFAR-10 binary batches, standardized per channel with train statistics."""
    directory = Path(directory)
    parts = [_read_cifar_batch(directory / f"data_batch_{i}.bin") for i in range(1, 6)]
    x_train = np.hstack([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = _read_cifar_batch(directory / "test_batch.bin")
    chan_train = x_train.reshape(3, 1024, -1)
    mean = chan_train.mean(axis=(1, 2))
    std = chan_train.std(axis=(1, 2))
    if np.any(std == 0):
        raise DataFormatError("a CIFAR channel has zero variance")

    def standardize(x):
        c = x.reshape(3, 1024, -1)
        return ((c - mean[:, None, None]) / std[:, None, None]).reshape(3072, -1)

    meta = {"padded": False, "normalization": "per-channel",
            "channel_mean": mean.tolist(), "channel_std": std.tolist()}
    return (Dataset(standardize(x_train), y_train, "cifar10", 10, "train", dict(meta)),
            Dataset(standardize(x_test), y_test, "cifar10", 10, "test", dict(meta)))


def load_uci_csv(path, target_cols, seed=0, train_fraction=0.9):
    """Numeric CSV with a header row -> z-scored regression train/test split."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    if isinstance(target_cols, str):
        target_cols = [target_cols]
    missing = [c for c in target_cols if c not in header]
    if missing:
        raise KeyError(f"target column(s) not in header: {missing}")
    try:
        table = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric cell ({exc})") from exc
    if table.ndim != 2 or table.shape[1] != len(header):
        raise DataFormatError(f"{path}: ragged rows")
    check_finite(table, "csv table")
    t_idx = [header.index(c) for c in target_cols]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    n = table.shape[0]
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(train_fraction * n)
    tr, te = perm[:n_train], perm[n_train:]

    def zscore(block):
        mu = block[tr].mean(axis=0)
        sd = block[tr].std(axis=0)
        sd[sd == 0] = 1.0
        return (block - mu) / sd

    feats = zscore(table[:, f_idx]).T
    targs = zscore(table[:, t_idx]).T
    feats, padded = pad_even(feats)
    if len(t_idx) > feats.shape[0]:
        raise ValueError("more target columns than (padded) feature rows")
    name = Path(path).stem
    meta = {"padded": padded, "normalization": "zscore", "features": [header[i] for i in f_idx]}
    return (Dataset(feats[:, tr], targs[:, tr], name, len(t_idx), "train", dict(meta)),
            Dataset(feats[:, te], targs[:, te], name, len(t_idx), "test", dict(meta)))


def synthetic_regression(d, n_train, teacher_seed=0, noise=0.01, d_y=None, n_test=None,
                         teacher_d_prime=None, teacher_blocks=2, teacher_init="xavier"):
    """Gaussian inputs labelled by a frozen random RevMLP teacher plus noise."""
    from .revnet import forward, init

    if d % 2:
        raise ValueError("d must be even")
    d_y = d if d_y is None else d_y
    n_test = max(1, n_train // 4) if n_test is None else n_test
    teacher = init(d, teacher_d_prime or 2 * d, teacher_blocks, d_y, seed=teacher_seed,
                   scheme=teacher_init)
    rng = np.random.default_rng(teacher_seed + 1)
    x = rng.normal(size=(d, n_train + n_test))
    y, _ = forward(teacher, x)
    y = y[:d_y] + noise * rng.normal(size=(d_y, n_train + n_test))
    meta = {"padded": False, "normalization": "none", "teacher_seed": teacher_seed,
            "noise": noise}
    return (Dataset(x[:, :n_train], y[:, :n_train], "synthetic", d_y, "train", dict(meta)),
            Dataset(x[:, n_train:], y[:, n_train:], "synthetic", d_y, "test", dict(meta)))


def subset(ds, k, seed=0):
    """``k`` samples drawn without replacement (sorted index order)."""
    if k > ds.n_samples:
        raise ValueError(f"subset of {k} from {ds.n_samples} samples")
    if k == ds.n_samples:
        return ds.select(np.arange(k))
    idx = np.sort(np.random.default_rng(seed).choice(ds.n_samples, size=k, replace=False))
    return ds.select(idx)


def crop_padded(x_batch, offsets, pad=4):
    """Zero-pad each 3x32x32 image by ``pad`` and crop 32x32 at the given offsets."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.shape[0] != 3072:
        raise ValueError(f"expected CIFAR-shaped (3072, n) batch, got {x_batch.shape}")
    n = x_batch.shape[1]
    imgs = x_batch.T.reshape(n, 3, 32, 32)
    padded = np.zeros((n, 3, 32 + 2 * pad, 32 + 2 * pad))
    padded[:, :, pad : pad + 32, pad : pad + 32] = imgs
    out = np.empty_like(imgs)
    for i, (r, c) in enumerate(offsets):
        out[i] = padded[i, :, r : r + 32, c : c + 32]
    return out.reshape(n, 3072).T


def augment_cifar(x_batch, seed, pad=4):
    """Random pad-and-crop of every image in a CIFAR batch."""
    x_batch = np.asarray(x_batch)
    if x_batch.ndim != 2 or x_batch.shape[0] != 3072:
        raise ValueError(f"expected CIFAR-shaped (3072, n) batch, got {x_batch.shape}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, 2 * pad + 1, size=(x_batch.shape[1], 2))
    return crop_padded(x_batch, offsets, pad)


@dataclass
class BatchPlan:
    """Seeded without-replacement batching; the trailing short batch is dropped."""

    n_samples: int
    batch_size: int
    seed: int = 0
    epoch: int = 0
    cursor: int = 0
    perm: np.ndarray = None

    def __post_init__(self):
        if self.batch_size > self.n_samples:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {self.n_samples}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.perm is None:
            self.perm = self._permutation(self.epoch)

    def _permutation(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_samples)

    @property
    def batches_per_epoch(self):
        return self.n_samples // self.batch_size

    def next_indices(self):
        if self.cursor + self.batch_size > self.n_samples:
            self.epoch += 1
            self.cursor = 0
            self.perm = self._permutation(self.epoch)
        idx = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx


def next_batch(ds, plan):
    """Next ``(x, y)`` batch; reshuffles after ``N // n`` batches."""
    if plan.batch_size > ds.n_samples:
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {ds.n_samples}")
    return ds.take(plan.next_indices())


def default_data_dir():
    return Path(os.environ.get("REVGN_DATA_DIR", "data"))


def load_named(name, path=None, **kw):
    """Load ``(train, test)`` by dataset name."""
    root = Path(path) if path else default_data_dir() / name
    if name == "mnist":
        return load_mnist(root)
    if name == "cifar10":
        return load_cifar10(root)
    if name == "synthetic":
        return synthetic_regression(int(kw.get("d", 8)), int(kw.get("n", 64)),
                                    int(kw.get("teacher_seed", 0)),
                                    float(kw.get("noise", 0.01)),
                                    kw.get("d_y") and int(kw["d_y"]))
    if name == "uci":
        return load_uci_csv(path, kw["target_cols"], int(kw.get("seed", 0)))
    raise ValueError(f"unknown dataset {name!r}")
