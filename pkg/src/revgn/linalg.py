"""Dense float64 matrix helpers: SVD, policy-regularized pseudoinverse, cosine.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64.  Every public
function checks its result for NaN/Inf and raises :class:`NonFiniteError`
instead of passing bad values downstream.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np


class NonFiniteError(FloatingPointError):
    """A matrix contained NaN or Inf."""


class SvdConvergenceError(np.linalg.LinAlgError):
    """The SVD iteration hit its sweep cap without converging."""


def as_mat(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array (no copy when possible)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def check_finite(a, name="matrix"):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b):
    a = as_mat(a, "a")
    b = as_mat(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return check_finite(a @ b, "product")


class SvdFactorization(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    def reconstruct(self):
        return (self.u * self.s) @ self.vt


def svd(a, method="lapack", tol=1e-12, max_sweeps=60):
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` descending.

    ``method="lapack"`` uses the divide-and-conquer LAPACK driver and falls
    back to the QR-iteration driver if it fails.  ``method="jacobi"`` runs a
    one-sided Jacobi sweep, stopping once the largest normalized column
    inner product is below ``tol``.
    """
    a = as_mat(a, "a")
    if a.size == 0:
        raise ValueError("svd of an empty matrix")
    if method == "lapack":
        fac = _svd_lapack(a)
    elif method == "jacobi":
        fac = _svd_jacobi(a, tol, max_sweeps)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    return fac


def _svd_lapack(a):
    import scipy.linalg

    try:
        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise SvdConvergenceError(str(exc)) from exc
    return SvdFactorization(u, s, vt)


def _svd_jacobi(a, tol, max_sweeps):
    m, n = a.shape
    if m < n:
        fac = _svd_jacobi(a.T, tol, max_sweeps)
        return SvdFactorization(fac.vt.T, fac.s, fac.u.T)

    # one-sided (Hestenes) Jacobi on the columns of a tall matrix
    work = a.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - s * work[:, q]
                work[:, q] = s * wp + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off <= tol:
            break
    else:
        raise SvdConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")

    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    work = work[:, order]
    v = v[:, order]
    u = np.zeros_like(work)
    cutoff = sing[0] * max(m, n) * np.finfo(float).eps if sing[0] > 0 else 0.0
    keep = sing > cutoff
    u[:, keep] = work[:, keep] / sing[keep]
    if not np.all(keep):
        # complete the basis for numerically-null directions
        q, _ = np.linalg.qr(np.hstack([u[:, keep], np.eye(m)]))
        u[:, ~keep] = q[:, keep.sum() : keep.sum() + (~keep).sum()]
    return SvdFactorization(u, sing, v.T)


@dataclass(frozen=True)
class Truncate:
    """Drop singular values below ``max(rtol * s_max, atol)``."""

    rtol: float = 0.01
    atol: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.rtol < 1.0 or self.atol < 0.0:
            raise ValueError(f"invalid truncation tolerances rtol={self.rtol}, atol={self.atol}")


@dataclass(frozen=True)
class Damp:
    """Invert ``s_i + frac * s_max`` for every singular value."""

    frac: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.frac < 1.0:
            raise ValueError(f"damping fraction must be in [0, 1), got {self.frac}")


@dataclass
class Noise:
    """Perturb the matrix with Gaussian noise of std ``frac * std(a)``, then invert exactly.

    The policy owns its random stream, so a training run that makes the same
    sequence of calls sees the same noise.
    """

    frac: float = 0.1
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.frac < 1.0:
            raise ValueError(f"noise fraction must be in [0, 1), got {self.frac}")
        self.rng = np.random.default_rng(self.seed)

    def reset(self):
        self.rng = np.random.default_rng(self.seed)


PinvPolicy = Union[Truncate, Damp, Noise]

#: No truncation beyond the numerical-rank floor.
EXACT = Truncate(0.0, 0.0)


def pseudoinverse(a, policy: PinvPolicy = EXACT, return_rank=False):
    """Pseudoinverse of ``a`` regularized according to ``policy``.

    Singular values below ``s_max * max(shape) * eps`` (or below the smallest
    normal float) count as zero under every policy except a nonzero damping.

    If every singular value is truncated the result is the zero matrix and
    the reported rank is 0; callers that cannot proceed on a rank-0 inverse
    must check for it.
    """
    a = as_mat(a, "a")
    if isinstance(policy, Noise):
        std = float(np.std(a))
        a = a + policy.rng.normal(0.0, policy.frac * std, size=a.shape)
    fac = svd(a)
    s = fac.s
    # numerical rank floor: anything below this is indistinguishable from zero
    fi = np.finfo(np.float64)
    floor = max(s[0] * max(a.shape) * fi.eps, fi.tiny) if s.size else 0.0
    if isinstance(policy, Truncate):
        thresh = max(policy.rtol * s[0], policy.atol) if s.size else 0.0
        keep = (s >= thresh) & (s > floor)
        inv = np.zeros_like(s)
        inv[keep] = 1.0 / s[keep]
        rank = int(keep.sum())
    elif isinstance(policy, Damp):
        shifted = s + policy.frac * s[0]
        keep = (shifted > floor) if policy.frac == 0.0 else (s[0] > 0.0) & (shifted > 0.0)
        inv = np.zeros_like(s)
        inv[keep] = 1.0 / shifted[keep]
        rank = int(keep.sum())
    elif isinstance(policy, Noise):
        keep = s > floor
        inv = np.zeros_like(s)
        inv[keep] = 1.0 / s[keep]
        rank = int(keep.sum())
    else:
        raise TypeError(f"unknown pseudoinverse policy {policy!r}")
    pinv = (fac.vt.T * inv) @ fac.u.T
    check_finite(pinv, "pseudoinverse")
    if return_rank:
        return pinv, rank
    return pinv


def frobenius_cosine(a, b):
    """Frobenius inner product of ``a`` and ``b`` divided by their norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero matrix")
    return float(np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0))
