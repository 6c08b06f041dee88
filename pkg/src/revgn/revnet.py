"""Reversible coupling-layer MLP (RevMLP) with its differentiation machinery.

Activations are stored column-per-sample: an input batch is a ``(d, n)``
matrix whose top half ``x1`` and bottom half ``x2`` are updated in turn::

    x1 <- x1 + w1 @ relu(va @ x2)
    x2 <- x2 + w2 @ relu(vb @ x1)

``w1``/``w2`` are trained, ``va``/``vb`` (the inverted bottleneck) are frozen.
Blocks are indexed from 0 in code.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .linalg import as_mat, check_finite

CHECKPOINT_MAGIC = b"RGN1"


class StaleCacheError(RuntimeError):
    """An activation cache was used after the model's parameters changed."""


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(z, kind):
    # ReLU derivative at exactly 0 is taken to be 0
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass(frozen=True)
class Xavier:
    """Uniform init with variance ``2 / (fan_in + fan_out)``."""


@dataclass(frozen=True)
class Gaussian:
    sigma: float = 1e-3

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def parse_init(spec):
    """``"xavier"``, ``"gaussian"`` or ``"gaussian:1e-3"`` -> init scheme."""
    if isinstance(spec, (Xavier, Gaussian)):
        return spec
    name, _, arg = str(spec).partition(":")
    if name == "xavier":
        return Xavier()
    if name == "gaussian":
        return Gaussian(float(arg)) if arg else Gaussian()
    raise ValueError(f"unknown init scheme {spec!r}")


def init_name(scheme):
    if isinstance(scheme, Xavier):
        return "xavier"
    return f"gaussian:{scheme.sigma!r}"


@dataclass
class CouplingBlock:
    w1: np.ndarray
    w2: np.ndarray
    va: np.ndarray
    vb: np.ndarray

    def __post_init__(self):
        self.va.setflags(write=False)
        self.vb.setflags(write=False)


@dataclass
class ActivationCache:
    """Everything a forward pass leaves behind for the derivative routines.

    Per block ``l``: ``x2_in`` (input bottom half), ``x1_out`` (updated top
    half), the pre-activations ``a1 = va @ x2_in`` and ``a2 = vb @ x1_out``,
    and their activations ``s1``/``s2``.
    """

    x0: np.ndarray
    xL: np.ndarray
    x2_in: List[np.ndarray]
    x1_out: List[np.ndarray]
    a1: List[np.ndarray]
    a2: List[np.ndarray]
    s1: List[np.ndarray]
    s2: List[np.ndarray]
    step: int

    @property
    def n(self):
        return self.x0.shape[1]

    def block_output(self, block):
        """Output of ``block`` as a ``(d, n)`` matrix (both halves stacked)."""
        last = len(self.x1_out) - 1
        x2 = self.xL[self.xL.shape[0] // 2 :] if block == last else self.x2_in[block + 1]
        return np.vstack([self.x1_out[block], x2])


@dataclass
class RevMLP:
    blocks: List[CouplingBlock]
    d: int
    d_prime: int
    d_y: int
    seed: int = 0
    init_scheme: object = field(default_factory=Gaussian)
    activation: str = "relu"
    no_bottleneck: bool = False
    step: int = 0

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def half(self):
        return self.d // 2

    @property
    def n_params(self):
        return 2 * self.n_blocks * self.half * self.d_prime

    def weights(self):
        """Trainable matrices in block order, ``w1`` before ``w2``."""
        out = []
        for blk in self.blocks:
            out.extend([blk.w1, blk.w2])
        return out

    def set_weights(self, mats):
        mats = list(mats)
        if len(mats) != 2 * self.n_blocks:
            raise ValueError(f"expected {2 * self.n_blocks} matrices, got {len(mats)}")
        for blk, w1, w2 in zip(self.blocks, mats[0::2], mats[1::2]):
            if w1.shape != blk.w1.shape or w2.shape != blk.w2.shape:
                raise ValueError("weight shape mismatch")
            blk.w1 = check_finite(np.array(w1, dtype=np.float64), "w1")
            blk.w2 = check_finite(np.array(w2, dtype=np.float64), "w2")
        self.step += 1

    def apply_update(self, deltas, scale):
        """``w <- w - scale * delta`` for every trainable matrix; bumps ``step``."""
        self.set_weights([w - scale * dw for w, dw in zip(self.weights(), deltas)])

    def flat_params(self):
        """Parameter vector; each matrix is flattened column-major."""
        return np.concatenate([w.ravel(order="F") for w in self.weights()])

    def set_flat_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        size = self.half * self.d_prime
        mats = [
            theta[i * size : (i + 1) * size].reshape((self.half, self.d_prime), order="F")
            for i in range(2 * self.n_blocks)
        ]
        self.set_weights(mats)

    def copy(self):
        blocks = [CouplingBlock(b.w1.copy(), b.w2.copy(), b.va, b.vb) for b in self.blocks]
        return RevMLP(blocks, self.d, self.d_prime, self.d_y, self.seed, self.init_scheme,
                      self.activation, self.no_bottleneck, self.step)


def init(d, d_prime, n_blocks, d_y, seed=0, scheme="gaussian", no_bottleneck=False,
         activation="relu"):
    """Build a RevMLP with seeded weights.

    Trainable matrices follow ``scheme``; bottleneck matrices are drawn from
    N(0, 1/(d/2)).  With ``no_bottleneck=True`` the bottleneck width is forced
    to ``d/2`` and both bottleneck matrices are the identity.
    """
    if d % 2:
        raise ValueError(f"width d must be even, got {d}")
    if d_y > d:
        raise ValueError(f"d_y={d_y} exceeds width d={d}")
    if n_blocks < 1:
        raise ValueError("need at least one block")
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    scheme = parse_init(scheme)
    h = d // 2
    if no_bottleneck:
        d_prime = h
    if d_prime < 1:
        raise ValueError("bottleneck width must be positive")
    rng = np.random.default_rng(seed)

    def draw_w():
        if isinstance(scheme, Xavier):
            limit = np.sqrt(6.0 / (h + d_prime))
            return rng.uniform(-limit, limit, size=(h, d_prime))
        return rng.normal(0.0, scheme.sigma, size=(h, d_prime))

    blocks = []
    for _ in range(n_blocks):
        w1 = draw_w()
        w2 = draw_w()
        if no_bottleneck:
            va = np.eye(h)
            vb = np.eye(h)
        else:
            va = rng.normal(0.0, np.sqrt(1.0 / h), size=(d_prime, h))
            vb = rng.normal(0.0, np.sqrt(1.0 / h), size=(d_prime, h))
        blocks.append(CouplingBlock(w1, w2, va, vb))
    return RevMLP(blocks, d, d_prime, d_y, seed, scheme, activation, no_bottleneck)


def _check_input(model, x):
    x = as_mat(x, "x")
    if x.shape[0] != model.d:
        raise ValueError(f"input has {x.shape[0]} rows, model width is {model.d}")
    return x


def forward(model, x):
    """Run the network; returns ``(output, cache)``."""
    x = _check_input(model, x)
    h = model.half
    x1, x2 = x[:h], x[h:]
    c = ActivationCache(x, None, [], [], [], [], [], [], model.step)
    for blk in model.blocks:
        a1 = blk.va @ x2
        s1 = _act(a1, model.activation)
        x1n = x1 + blk.w1 @ s1
        a2 = blk.vb @ x1n
        s2 = _act(a2, model.activation)
        x2n = x2 + blk.w2 @ s2
        c.x2_in.append(x2)
        c.x1_out.append(x1n)
        c.a1.append(a1)
        c.a2.append(a2)
        c.s1.append(s1)
        c.s2.append(s2)
        x1, x2 = x1n, x2n
    y = np.vstack([x1, x2])
    check_finite(y, "network output")
    c.xL = y
    return y, c


def inverse(model, y):
    """Recover the input from an output by undoing the blocks in reverse."""
    y = _check_input(model, y)
    h = model.half
    x1, x2 = y[:h], y[h:]
    for blk in reversed(model.blocks):
        x2 = x2 - blk.w2 @ _act(blk.vb @ x1, model.activation)
        x1 = x1 - blk.w1 @ _act(blk.va @ x2, model.activation)
    return check_finite(np.vstack([x1, x2]), "inverse output")


def _check_cache(model, cache):
    if cache.step != model.step:
        raise StaleCacheError(
            f"cache from step {cache.step} used with parameters at step {model.step}")
    if len(cache.s1) != model.n_blocks:
        raise StaleCacheError("cache does not match the model's block count")


def inverse_jvp_all(model, cache, eps, stop=0):
    """Push ``eps`` through the linearized inverse map, top block to ``stop``.

    Returns a list indexed by block whose entry ``l`` (for ``l >= stop``) is
    the pair ``(t1, t2)``: the tangents of ``x1``/``x2`` at the output of
    block ``l``.  Entries below ``stop`` are ``None``.
    """
    _check_cache(model, cache)
    eps = as_mat(eps, "eps")
    if eps.shape != (model.d, cache.n):
        raise ValueError(f"direction shape {eps.shape} != output shape {(model.d, cache.n)}")
    h = model.half
    t1, t2 = eps[:h], eps[h:]
    out = [None] * model.n_blocks
    for l in range(model.n_blocks - 1, stop - 1, -1):
        out[l] = (t1, t2)
        if l == stop:
            break
        blk = model.blocks[l]
        t2 = t2 - blk.w2 @ (_act_grad(cache.a2[l], model.activation) * (blk.vb @ t1))
        t1 = t1 - blk.w1 @ (_act_grad(cache.a1[l], model.activation) * (blk.va @ t2))
    return out


def inverse_jvp(model, cache, block, half, eps):
    """``(d x^{half}_block / d x_L) . eps`` as a ``(d/2, n)`` matrix.

    ``half`` is 1 or 2.  ``block`` indexes the output of that block; for the
    last block this is the matching half of ``eps`` itself.
    """
    if half not in (1, 2):
        raise ValueError("half must be 1 or 2")
    if not 0 <= block < model.n_blocks:
        raise IndexError(f"block {block} out of range")
    t1, t2 = inverse_jvp_all(model, cache, eps, stop=block)[block]
    return t1 if half == 1 else t2


def weight_jvp_x2(model, cache, block, delta1):
    """Change in ``x2`` at the output of ``block`` when ``w1`` moves along ``delta1``.

    Shifting ``w1`` by ``delta1`` moves ``x1`` by ``delta1 @ s1``, which then
    feeds the second coupling equation.
    """
    _check_cache(model, cache)
    blk = model.blocks[block]
    delta1 = as_mat(delta1, "delta1")
    if delta1.shape != blk.w1.shape:
        raise ValueError(f"delta1 shape {delta1.shape} != w1 shape {blk.w1.shape}")
    dx1 = delta1 @ cache.s1[block]
    return blk.w2 @ (_act_grad(cache.a2[block], model.activation) * (blk.vb @ dx1))


def backprop_sites(model, cache, u):
    """Reverse-mode sweep returning the output cotangents seen by each weight.

    Entry ``l`` is ``(g1, g2)``: the cotangents of ``x1_out[l]`` and of
    block ``l``'s output ``x2`` at the point where ``w1`` resp. ``w2`` act,
    each ``(d/2, n)``.  The gradient of ``<u, f>`` w.r.t. ``w1`` is then
    ``g1 @ s1.T``.  Columns stay per-sample, which the NTK routine relies on.
    Also returns the cotangent of the input.
    """
    _check_cache(model, cache)
    u = as_mat(u, "u")
    if u.shape != (model.d, cache.n):
        raise ValueError(f"cotangent shape {u.shape} != output shape {(model.d, cache.n)}")
    h = model.half
    g1, g2 = u[:h].copy(), u[h:].copy()
    sites = [None] * model.n_blocks
    for l in range(model.n_blocks - 1, -1, -1):
        blk = model.blocks[l]
        g2_site = g2
        g1 = g1 + blk.vb.T @ (_act_grad(cache.a2[l], model.activation) * (blk.w2.T @ g2))
        g1_site = g1
        g2 = g2 + blk.va.T @ (_act_grad(cache.a1[l], model.activation) * (blk.w1.T @ g1))
        sites[l] = (g1_site, g2_site)
    return sites, np.vstack([g1, g2])


def vjp(model, cache, u):
    """Gradients of ``<u, f(theta)>`` for every trainable matrix, in ``weights()`` order."""
    sites, _ = backprop_sites(model, cache, u)
    grads = []
    for l, (g1, g2) in enumerate(sites):
        grads.append(g1 @ cache.s1[l].T)
        grads.append(g2 @ cache.s2[l].T)
    return grads


def logits(y, d_y):
    if d_y > y.shape[0]:
        raise ValueError(f"d_y={d_y} exceeds output width {y.shape[0]}")
    return y[:d_y]


def save_checkpoint(model, path, metadata=None):
    """Write the binary checkpoint and a ``.json`` sibling with metadata."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<5I", model.d, model.d_prime, model.n_blocks, model.d_y, model.seed))
        for blk in model.blocks:
            for mat in (blk.w1, blk.w2, blk.va, blk.vb):
                fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    meta = {
        "init_scheme": init_name(model.init_scheme),
        "step": model.step,
        "activation": model.activation,
        "no_bottleneck": model.no_bottleneck,
    }
    if metadata:
        meta.update(metadata)
    meta.setdefault("config_hash", None)
    with open(_meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return path


def _meta_path(path):
    return Path(str(path) + ".json")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    d, d_prime, n_blocks, d_y, seed = struct.unpack_from("<5I", raw, 4)
    h = d // 2
    expected = 24 + n_blocks * 4 * h * d_prime * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8", offset=24).astype(np.float64)
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text())
    blocks = []
    size = h * d_prime
    pos = 0
    for _ in range(n_blocks):
        w1 = flat[pos : pos + size].reshape(h, d_prime); pos += size
        w2 = flat[pos : pos + size].reshape(h, d_prime); pos += size
        va = flat[pos : pos + size].reshape(d_prime, h).copy(); pos += size
        vb = flat[pos : pos + size].reshape(d_prime, h).copy(); pos += size
        blocks.append(CouplingBlock(w1.copy(), w2.copy(), va, vb))
    model = RevMLP(
        blocks, d, d_prime, d_y, seed,
        parse_init(meta.get("init_scheme", "gaussian")),
        meta.get("activation", "relu"),
        bool(meta.get("no_bottleneck", False)),
        int(meta.get("step", 0)),
    )
    return model, meta
