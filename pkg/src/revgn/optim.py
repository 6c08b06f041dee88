"""Parameter updates: exact layer-wise Gauss-Newton, SGD and Adam.

The Gauss-Newton step solves ``J dtheta = eps`` with a right inverse that
factorizes over blocks.  For block ``l``, with ``g1``/``g2`` the error pulled
back to the block's output through the inverse network::

    delta1 = g1 @ pinv(s1)
    delta2 = (g2 - B(delta1)) @ pinv(s2)

where ``B(delta1)`` is the change in ``x2`` caused by moving ``w1`` along
``delta1``.  Each block is then stepped by ``lr / L`` times its delta.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import losses
from .linalg import EXACT, Damp, Noise, Truncate, pseudoinverse
from .revnet import forward, inverse_jvp_all, logits, vjp, weight_jvp_x2

log = logging.getLogger(__name__)


class GNStepError(RuntimeError):
    """The Gauss-Newton step could not be formed (e.g. a rank-0 pseudoinverse)."""


@dataclass
class GNConfig:
    lr: float = 1.0
    pinv: object = field(default_factory=lambda: Truncate(0.01, 1e-5))
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class SGDConfig:
    lr: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0 or self.weight_decay < 0:
            raise ValueError("invalid SGD config")


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps_hat <= 0 or self.lr <= 0:
            raise ValueError("invalid Adam config")


@dataclass
class OptState:
    step: int = 0
    m: Optional[List[np.ndarray]] = None
    v: Optional[List[np.ndarray]] = None


@dataclass
class StepReport:
    loss_before: float
    ranks: list = field(default_factory=list)
    update_norms: list = field(default_factory=list)


def gn_error(kind, f, y, d):
    """Function-space error used by the Gauss-Newton step.

    This is the gradient of the *summed* loss, i.e. ``n`` times the
    mean-loss gradient, so one step at ``lr = 1`` moves the logits by the
    full error regardless of batch size.
    """
    return f.shape[1] * losses.functional_gradient(kind, f, y, d)


def gn_directions(model, cache, eps, policy=EXACT):
    """Per-block ``(delta1, delta2)`` for error ``eps``, without the ``lr / L`` factor.

    Returns the flat list of deltas in ``model.weights()`` order and a list of
    ``(rank1, rank2)`` pseudoinverse ranks.
    """
    tangents = inverse_jvp_all(model, cache, eps)
    deltas, ranks = [], []
    for l in range(model.n_blocks):
        g1, g2 = tangents[l]
        p1, r1 = pseudoinverse(cache.s1[l], policy, return_rank=True)
        delta1 = g1 @ p1
        c = weight_jvp_x2(model, cache, l, delta1)
        p2, r2 = pseudoinverse(cache.s2[l], policy, return_rank=True)
        delta2 = (g2 - c) @ p2
        deltas.extend([delta1, delta2])
        ranks.append((r1, r2))
    return deltas, ranks


def right_inverse_apply(model, cache, v, policy=EXACT):
    """Layer-wise right inverse applied to ``v`` (a ``(d, n)`` output direction).

    Returns the parameter-space vector ``(1/L) * stack(J_l^- v)`` with the
    same flattening as :meth:`RevMLP.flat_params`.
    """
    deltas, _ = gn_directions(model, cache, v, policy)
    return np.concatenate([dw.ravel(order="F") for dw in deltas]) / model.n_blocks


def _check_batch(model, n):
    if n > model.d_prime:
        if model.no_bottleneck:
            log.info("batch size %d exceeds bottleneck width %d; sigma matrices cannot have "
                     "independent columns, applying the update anyway", n, model.d_prime)
        else:
            raise ValueError(
                f"batch size {n} exceeds bottleneck width {model.d_prime}; "
                "the layer-wise right inverse needs n <= d_prime")


def gn_step(model, x, y, kind, cfg: GNConfig, cache=None):
    """One synchronous Gauss-Newton update of every block.

    All deltas are computed from a single forward pass at the current
    parameters before any weight changes.
    """
    if cache is None:
        _, cache = forward(model, x)
    _check_batch(model, cache.n)
    f = logits(cache.xL, model.d_y)
    report = StepReport(losses.loss_value(kind, f, y))
    eps = gn_error(kind, f, y, model.d)
    deltas, ranks = gn_directions(model, cache, eps, cfg.pinv)
    report.ranks = ranks
    for l, (r1, r2) in enumerate(ranks):
        if r1 == 0 or r2 == 0:
            raise GNStepError(f"block {l}: every singular value was truncated "
                              f"(ranks {r1}, {r2}); step aborted")
    scale = cfg.lr / model.n_blocks
    report.update_norms = [scale * float(np.linalg.norm(dw)) for dw in deltas]
    model.apply_update(deltas, scale)
    if cfg.weight_decay:
        model.set_weights([w * (1.0 - cfg.lr * cfg.weight_decay) for w in model.weights()])
    return report


def sgd_step(model, cache, eps, cfg: SGDConfig):
    """``w <- w - lr * (grad + wd * w)`` with ``grad = J^T eps``."""
    grads = vjp(model, cache, eps)
    model.apply_update(
        [g + cfg.weight_decay * w for g, w in zip(grads, model.weights())], cfg.lr)
    return grads


def adam_step(model, cache, eps, cfg: AdamConfig, state: OptState):
    """Bias-corrected Adam on ``J^T eps``; weight decay is decoupled."""
    grads = vjp(model, cache, eps)
    if state.m is None:
        state.m = [np.zeros_like(g) for g in grads]
        state.v = [np.zeros_like(g) for g in grads]
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    updates = []
    for i, g in enumerate(grads):
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        updates.append(m_hat / (np.sqrt(v_hat) + cfg.eps_hat))
    weights = model.weights()
    new = [w - cfg.lr * u for w, u in zip(weights, updates)]
    if cfg.weight_decay:
        new = [w - cfg.lr * cfg.weight_decay * w0 for w, w0 in zip(new, weights)]
    model.set_weights(new)
    return grads


class GaussNewton:
    name = "gn"

    def __init__(self, config=None):
        self.config = config or GNConfig()

    def step(self, model, x, y, kind, cache=None):
        return gn_step(model, x, y, kind, self.config, cache)


class _FirstOrder:
    def _prepare(self, model, x, y, kind, cache):
        if cache is None:
            _, cache = forward(model, x)
        f = logits(cache.xL, model.d_y)
        eps = losses.functional_gradient(kind, f, y, model.d)
        return cache, eps, StepReport(losses.loss_value(kind, f, y))


class SGD(_FirstOrder):
    name = "sgd"

    def __init__(self, config=None):
        self.config = config or SGDConfig()

    def step(self, model, x, y, kind, cache=None):
        cache, eps, report = self._prepare(model, x, y, kind, cache)
        grads = sgd_step(model, cache, eps, self.config)
        report.update_norms = [self.config.lr * float(np.linalg.norm(g)) for g in grads]
        return report


class Adam(_FirstOrder):
    name = "adam"

    def __init__(self, config=None):
        self.config = config or AdamConfig()
        self.state = OptState()

    def step(self, model, x, y, kind, cache=None):
        cache, eps, report = self._prepare(model, x, y, kind, cache)
        adam_step(model, cache, eps, self.config, self.state)
        return report


OPTIMIZERS = {"gn": GaussNewton, "sgd": SGD, "adam": Adam}


def make_pinv_policy(name="truncate", rtol=0.01, atol=1e-5, frac=None, seed=0):
    if name == "truncate":
        return Truncate(rtol, atol)
    if name == "damp":
        return Damp(0.01 if frac is None else frac)
    if name == "noise":
        return Noise(0.1 if frac is None else frac, seed)
    if name == "exact":
        return EXACT
    raise ValueError(f"unknown pseudoinverse policy {name!r}")


def switch_schedule(epoch, spec):
    """Optimizer active at ``epoch`` for a list of ``(start_epoch, name)`` pairs."""
    spec = list(spec)
    if not spec:
        raise ValueError("empty optimizer schedule")
    starts = [s for s, _ in spec]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError(f"schedule thresholds must be strictly increasing: {starts}")
    active = spec[0][1]
    for start, name in spec:
        if epoch >= start:
            active = name
    return active


def lr_grid(upper=1.0):
    """Learning-rate grid ``3^k * 1e-5`` up to ``upper`` (inclusive)."""
    grid = []
    k = 0
    while 3.0 ** k * 1e-5 < upper:
        grid.append(3.0 ** k * 1e-5)
        k += 1
    grid.append(upper)
    return grid
