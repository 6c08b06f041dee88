"""Function-space losses and their gradients with respect to the logits.

Targets are either integer class labels (1-D, length ``n``) or a regression
matrix shaped like the logits ``(d_y, n)``.  Losses are per-sample means.
"""
import numpy as np

SQUARE = "square"
CROSS_ENTROPY = "cross_entropy"
LOSS_KINDS = (SQUARE, CROSS_ENTROPY)


def is_labels(y):
    y = np.asarray(y)
    return y.ndim == 1


def _check(kind, f, y):
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("logits must be a (d_y, n) matrix")
    d_y, n = f.shape
    if is_labels(y):
        y = np.asarray(y)
        if y.shape != (n,):
            raise ValueError(f"{y.shape[0]} labels for {n} samples")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("class labels must be integers")
        if y.size and (y.min() < 0 or y.max() >= d_y):
            raise ValueError(f"label out of range for {d_y} classes")
        if kind == SQUARE:
            y = one_hot(y, d_y)
    else:
        if kind == CROSS_ENTROPY:
            raise ValueError("cross-entropy needs class labels")
        y = np.asarray(y, dtype=np.float64)
        if y.shape != f.shape:
            raise ValueError(f"target shape {y.shape} != logits shape {f.shape}")
    return f, y


def one_hot(labels, d_y):
    labels = np.asarray(labels)
    out = np.zeros((d_y, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def log_softmax(f):
    shifted = f - f.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax(f):
    return np.exp(log_softmax(f))


def loss_value(kind, f, y):
    """Mean loss over the ``n`` columns of ``f``."""
    f, y = _check(kind, f, y)
    n = f.shape[1]
    if kind == SQUARE:
        return float(0.5 * np.sum((f - y) ** 2) / n)
    logp = log_softmax(f)
    return float(-logp[y, np.arange(n)].sum() / n)


def functional_gradient(kind, f, y, d=None):
    """Gradient of :func:`loss_value` w.r.t. the logits, zero-padded to ``d`` rows.

    Rows past ``d_y`` correspond to network outputs that are not read out,
    so they carry no error.
    """
    f, y = _check(kind, f, y)
    d_y, n = f.shape
    if kind == SQUARE:
        g = (f - y) / n
    else:
        g = softmax(f)
        g[y, np.arange(n)] -= 1.0
        g /= n
    if d is None or d == d_y:
        return g
    if d < d_y:
        raise ValueError(f"cannot pad {d_y} logit rows into width {d}")
    out = np.zeros((d, n))
    out[:d_y] = g
    return out


def accuracy(f, labels):
    """Fraction of columns whose argmax (lowest index on ties) equals the label."""
    f = np.asarray(f)
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(f, axis=0) == labels))
