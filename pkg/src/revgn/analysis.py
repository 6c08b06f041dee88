"""Training diagnostics: empirical NTK, linear CKA, weight cosines, per-batch loss change.

The NTK is taken over the logit rows only.  Its rows and columns are indexed
by ``sample + m * class`` for ``m`` probe samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import revnet
from .linalg import frobenius_cosine

MAX_NTK = 2048


@dataclass(frozen=True)
class ProbeSet:
    """Fixed inputs on which kernels and representations are compared."""

    x: np.ndarray
    d_y: int
    seed: int = 0

    @property
    def m(self):
        return self.x.shape[1]


def make_probe(dataset, m=100, seed=0):
    """Draw ``m`` probe samples (without replacement) from a dataset."""
    if m > dataset.n_samples:
        raise ValueError(f"probe of {m} from {dataset.n_samples} samples")
    idx = np.sort(np.random.default_rng(seed).choice(dataset.n_samples, size=m, replace=False))
    return ProbeSet(dataset.x[:, idx].copy(), dataset.d_y, seed)


def ntk(model, probe):
    """Empirical NTK ``J J^T`` of the logits on the probe set.

    Each parameter-gradient row is a sum of outer products ``g s^T`` per
    weight, so the Gram matrix factorizes into ``(G^T G) * (S^T S)``
    without ever forming ``J``.
    """
    m, k = probe.m, probe.d_y
    if m * k > MAX_NTK:
        raise ValueError(f"NTK of size {m * k} exceeds the limit {MAX_NTK}")
    _, cache = revnet.forward(model, probe.x)
    # cotangent sites per class; one reverse sweep each
    per_block = []
    for c in range(k):
        u = np.zeros((model.d, m))
        u[c] = 1.0
        s, _ = revnet.backprop_sites(model, cache, u)
        per_block.append(s)
    theta = np.zeros((m * k, m * k))
    for l in range(model.n_blocks):
        for half, acts in ((0, cache.s1[l]), (1, cache.s2[l])):
            g = np.hstack([per_block[c][l][half] for c in range(k)])
            gram_s = acts.T @ acts
            theta += (g.T @ g) * np.tile(gram_s, (k, k))
    return 0.5 * (theta + theta.T)


def ntk_similarity(theta_t, theta_0):
    return frobenius_cosine(theta_t, theta_0)


def ntk_rate_of_change(theta_t, theta_prev):
    """Relative Frobenius distance between consecutive kernels."""
    theta_t = np.asarray(theta_t)
    theta_prev = np.asarray(theta_prev)
    if theta_t.shape != theta_prev.shape:
        raise ValueError("kernel shapes differ")
    base = np.linalg.norm(theta_prev)
    if base == 0.0:
        raise ValueError("previous kernel is zero")
    return float(np.linalg.norm(theta_t - theta_prev) / base)


def linear_cka(x_rep, y_rep):
    """Linear CKA between two ``(features, m)`` representations of the same samples."""
    x_rep = np.asarray(x_rep, dtype=np.float64)
    y_rep = np.asarray(y_rep, dtype=np.float64)
    if x_rep.shape[1] != y_rep.shape[1]:
        raise ValueError("representations must cover the same samples")
    if x_rep.shape[1] < 2:
        raise ValueError("need at least two samples")
    xc = x_rep - x_rep.mean(axis=1, keepdims=True)
    yc = y_rep - y_rep.mean(axis=1, keepdims=True)
    nx = np.linalg.norm(xc @ xc.T)
    ny = np.linalg.norm(yc @ yc.T)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("representation has zero variance")
    val = np.linalg.norm(yc @ xc.T) ** 2 / (nx * ny)
    return float(np.clip(val, 0.0, 1.0))


def block_representations(model, probe, block, cache=None):
    """Output of ``block`` (0-based) on the probe inputs, both halves stacked."""
    if not 0 <= block < model.n_blocks:
        raise IndexError(f"block {block} out of range")
    if cache is None:
        _, cache = revnet.forward(model, probe.x)
    return cache.block_output(block)


def weight_cosine(model_t, model_0):
    """Cosine of each trainable matrix with its initial value."""
    wt, w0 = model_t.weights(), model_0.weights()
    if len(wt) != len(w0):
        raise ValueError("architectures differ")
    return [frobenius_cosine(a, b) for a, b in zip(wt, w0)]


def minibatch_loss_change(loss_before, loss_after):
    """Percent change of a batch's loss across the update computed on it."""
    if not loss_before > 0:
        raise ValueError("loss before the update must be positive")
    return 100.0 * (loss_after - loss_before) / loss_before


def compare_to_reference(model_t, model_0, probe, theta_0=None, theta_prev=None):
    """NTK similarity, per-block CKA and weight cosines of ``model_t`` against ``model_0``.

    Returns ``(metrics, theta_t)`` so the caller can keep the kernel for the
    next rate-of-change computation.
    """
    if (model_t.d, model_t.d_prime, model_t.n_blocks) != (model_0.d, model_0.d_prime,
                                                        model_0.n_blocks):
        raise ValueError("architectures differ")
    theta_t = ntk(model_t, probe)
    theta_0 = ntk(model_0, probe) if theta_0 is None else theta_0
    _, c_t = revnet.forward(model_t, probe.x)
    _, c_0 = revnet.forward(model_0, probe.x)
    out = {
        "ntk_similarity": ntk_similarity(theta_t, theta_0),
        "ntk_rate": ntk_rate_of_change(theta_t, theta_prev) if theta_prev is not None else None,
        "cka": [linear_cka(c_t.block_output(l), c_0.block_output(l))
                for l in range(model_t.n_blocks)],
        "weight_cosine": weight_cosine(model_t, model_0),
    }
    return out, theta_t
