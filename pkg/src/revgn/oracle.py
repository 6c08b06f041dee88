"""Brute-force dense checks of the algebra behind the layer-wise GN step.

Everything here builds explicit matrices and is only meant for tiny models.
Vectorization is column-major throughout: entry ``(i, j)`` of a ``(r, c)``
matrix sits at position ``i + r * j``.  Parameter vectors list the trainable
matrices in ``model.weights()`` order.

The dense pieces deliberately avoid the package's own SVD/pseudoinverse
(``numpy.linalg.pinv`` is used instead) and its inverse-map JVP, so the
checks compare two independent routes.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from . import revnet
from .linalg import EXACT
from .optim import GNConfig, gn_error, gn_step, right_inverse_apply

MAX_ROWS = 512
MAX_PARAMS = 4096


class SizeGuardError(ValueError):
    """The instance is too large for dense verification."""


class RankDeficiencyError(np.linalg.LinAlgError):
    """An activation matrix lacks linearly independent columns."""


class OracleMismatch(AssertionError):
    """Two routes to the same quantity disagree."""


@dataclass
class CheckReport:
    check: str
    instance_params: dict
    residuals: dict
    passed: bool
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        out["pass"] = out.pop("passed")
        if not out["notes"]:
            out.pop("notes")
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, default=float)


@dataclass
class DenseJacobian:
    j: np.ndarray
    fd_rel_err: float = float("nan")

    def layer(self, model, block):
        """Columns belonging to ``block`` (its ``w1`` then ``w2``)."""
        size = 2 * model.half * model.d_prime
        return self.j[:, block * size : (block + 1) * size]


def describe(model, n):
    return {"d": model.d, "d_prime": model.d_prime, "L": model.n_blocks, "n": int(n),
            "seed": model.seed, "activation": model.activation}


def _guard(model, n):
    rows = model.d * n
    if rows > MAX_ROWS or model.n_params > MAX_PARAMS:
        raise SizeGuardError(
            f"dense oracle limited to n*d <= {MAX_ROWS} and p <= {MAX_PARAMS}; "
            f"got n*d = {rows}, p = {model.n_params}")


def _vecF(a):
    return np.asarray(a).ravel(order="F")


def _unit(shape, k):
    e = np.zeros(shape[0] * shape[1])
    e[k] = 1.0
    return e.reshape(shape, order="F")


def _outputs(model, x, theta):
    m = model.copy()
    m.set_flat_params(theta)
    return _vecF(revnet.forward(m, x)[0])


def dense_jacobian(model, x, fd_columns=20, fd_tol=1e-5, seed=0):
    """Jacobian of ``vec(x_L)`` w.r.t. the parameter vector, assembled from VJPs.

    Row ``r`` is the gradient for the unit cotangent on output ``r``.  A
    sample of ``fd_columns`` columns is re-derived by central differences and
    an :class:`OracleMismatch` is raised if any differs by more than ``fd_tol``
    relative.
    """
    x = np.asarray(x, dtype=np.float64)
    _guard(model, x.shape[1])
    _, cache = revnet.forward(model, x)
    shape = (model.d, x.shape[1])
    rows = []
    for r in range(shape[0] * shape[1]):
        grads = revnet.vjp(model, cache, _unit(shape, r))
        rows.append(np.concatenate([_vecF(g) for g in grads]))
    jac = np.array(rows)
    worst = 0.0
    if fd_columns:
        rng = np.random.default_rng(seed)
        theta = model.flat_params()
        cols = rng.choice(jac.shape[1], size=min(fd_columns, jac.shape[1]), replace=False)
        for c in cols:
            step = 1e-6 * max(1.0, abs(theta[c]))
            e = np.zeros_like(theta)
            e[c] = step
            fd = (_outputs(model, x, theta + e) - _outputs(model, x, theta - e)) / (2 * step)
            scale = max(np.linalg.norm(jac[:, c]), np.linalg.norm(fd), 1e-8)
            worst = max(worst, np.linalg.norm(fd - jac[:, c]) / scale)
        if worst > fd_tol:
            raise OracleMismatch(f"VJP Jacobian differs from finite differences by {worst:.2e}")
    return DenseJacobian(jac, worst)


# -- explicit per-block pieces -------------------------------------------------

def block_local_jacobian(model, cache, block):
    """``(A, B, C)`` for one block, as explicit matrices.

    ``A = d x1_out / d w1``, ``B = d x2_out / d w1`` and ``C = d x2_out / d w2``
    (``d x1_out / d w2`` is zero).  ``A`` and ``C`` are Kronecker products
    ``s^T (x) I``; ``B`` is written out entrywise.
    """
    h = model.half
    blk = model.blocks[block]
    s1, s2 = cache.s1[block], cache.s2[block]
    eye = np.eye(h)
    a = np.kron(s1.T, eye)
    c = np.kron(s2.T, eye)
    sp = revnet._act_grad(cache.a2[block], model.activation)
    # B[i, j, a, b] = s1[b, j] * sum_k w2[i, k] vb[k, a] sp[k, j]
    t = np.einsum("ik,ka,kj->ija", blk.w2, blk.vb, sp)
    b4 = t[:, :, :, None] * s1.T[None, :, None, :]
    b = b4.reshape(h * cache.n, h * model.d_prime, order="F")
    return a, b, c


def _halves_to_full(model, n):
    """Permutation taking ``[vec(x1); vec(x2)]`` to ``vec([x1; x2])``."""
    h, d = model.half, model.d
    perm = np.zeros((d * n, d * n))
    for j in range(n):
        for r in range(d):
            local = r + h * j if r < h else h * n + (r - h) + h * j
            perm[r + d * j, local] = 1.0
    return perm


def _block_input_jacobian(model, cache, block):
    """Jacobian of a block's output w.r.t. its input; block diagonal over samples."""
    h = model.half
    blk = model.blocks[block]
    s1p = revnet._act_grad(cache.a1[block], model.activation)
    s2p = revnet._act_grad(cache.a2[block], model.activation)
    per_sample = []
    for j in range(cache.n):
        d1 = np.eye(model.d)
        d1[:h, h:] = blk.w1 @ (s1p[:, j : j + 1] * blk.va)
        d2 = np.eye(model.d)
        d2[h:, :h] = blk.w2 @ (s2p[:, j : j + 1] * blk.vb)
        per_sample.append(d2 @ d1)
    return scipy.linalg.block_diag(*per_sample)


def output_sensitivity(model, cache, block):
    """``d vec(x_L) / d vec(x_block)`` where ``x_block`` is the block's output."""
    m = np.eye(model.d * cache.n)
    for k in range(block + 1, model.n_blocks):
        m = _block_input_jacobian(model, cache, k) @ m
    return m


def factored_layer_jacobian(model, cache, block):
    """``J_l`` built as sensitivity x permutation x local Jacobian."""
    a, b, c = block_local_jacobian(model, cache, block)
    local = np.block([[a, np.zeros_like(c)], [b, c]])
    return output_sensitivity(model, cache, block) @ _halves_to_full(model, cache.n) @ local


def _check_rank(s, name, rtol=1e-8):
    if s.shape[1] > s.shape[0]:
        raise RankDeficiencyError(f"{name}: {s.shape[1]} columns exceed {s.shape[0]} rows")
    sv = np.linalg.svd(s, compute_uv=False)
    if sv[-1] <= rtol * sv[0]:
        raise RankDeficiencyError(
            f"{name}: smallest singular value {sv[-1]:.3e} <= {rtol} * largest {sv[0]:.3e}")


def dense_layer_right_inverse(model, cache, block):
    """Block-triangular right inverse of ``J_l`` (without the ``1/L`` factor)."""
    _check_rank(cache.s1[block], f"block {block} s1")
    _check_rank(cache.s2[block], f"block {block} s2")
    a, b, c = block_local_jacobian(model, cache, block)
    a_p = np.linalg.pinv(a)
    c_p = np.linalg.pinv(c)
    k_inv = np.block([[a_p, np.zeros((a_p.shape[0], c_p.shape[1]))],
                      [-c_p @ b @ a_p, c_p]])
    m_inv = np.linalg.inv(output_sensitivity(model, cache, block))
    return k_inv @ _halves_to_full(model, cache.n).T @ m_inv


def dense_right_inverse(model, x):
    """``(1/L) * stack(J_l^-)`` as a ``(p, n*d)`` matrix."""
    x = np.asarray(x, dtype=np.float64)
    _guard(model, x.shape[1])
    _, cache = revnet.forward(model, x)
    parts = [dense_layer_right_inverse(model, cache, l) for l in range(model.n_blocks)]
    return np.vstack(parts) / model.n_blocks


def layerwise_right_inverse_matrix(model, cache, policy=EXACT):
    """The optimizer's right inverse applied to every unit output direction."""
    shape = (model.d, cache.n)
    cols = [right_inverse_apply(model, cache, _unit(shape, k), policy)
            for k in range(shape[0] * shape[1])]
    return np.array(cols).T


# -- checks ------------------------------------------------------------------------

def random_instance(rng, d_choices=(4, 8), dp_choices=(8, 16), l_choices=(1, 2, 3),
                    n_choices=(2, 3), scheme="xavier", activation="relu", max_tries=20):
    """Random tiny model and input whose activation matrices have full column rank."""
    d = int(rng.choice(d_choices))
    dp = int(rng.choice(dp_choices))
    n_blocks = int(rng.choice(l_choices))
    n = int(min(rng.choice(n_choices), dp))
    seed = int(rng.integers(2**31))
    model = revnet.init(d, dp, n_blocks, d, seed=seed, scheme=scheme, activation=activation)
    for _ in range(max_tries):
        x = rng.normal(size=(d, n))
        _, cache = revnet.forward(model, x)
        try:
            for l in range(n_blocks):
                _check_rank(cache.s1[l], "s1")
                _check_rank(cache.s2[l], "s2")
        except RankDeficiencyError:
            continue
        return model, x
    raise RankDeficiencyError("could not draw a full-rank instance")


def check_jacobian_consistency(model, x, tol=1e-9):
    """VJP-assembled Jacobian vs the factored form and vs forward-mode JVP."""
    jac = dense_jacobian(model, x)
    _, cache = revnet.forward(model, x)
    fact = np.hstack([factored_layer_jacobian(model, cache, l) for l in range(model.n_blocks)])
    rel_fact = np.linalg.norm(fact - jac.j) / max(np.linalg.norm(jac.j), 1e-300)
    # forward mode: output tangent from the inverse-map-free recursion
    rng = np.random.default_rng(0)
    v = rng.normal(size=model.n_params)
    jv_fwd = _vecF(_forward_tangent(model, cache, v))
    rel_fwd = np.linalg.norm(jv_fwd - jac.j @ v) / max(np.linalg.norm(jac.j @ v), 1e-300)
    res = {"fd_rel_err": jac.fd_rel_err, "factored_rel_err": rel_fact, "jvp_rel_err": rel_fwd}
    return CheckReport("jacobian_consistency", describe(model, x.shape[1]), res,
                       bool(rel_fact <= tol and rel_fwd <= tol and jac.fd_rel_err <= 1e-5))


def _forward_tangent(model, cache, v):
    """Forward-mode tangent of ``x_L`` for a parameter direction ``v``."""
    h, dp = model.half, model.d_prime
    size = h * dp
    t1 = np.zeros((h, cache.n))
    t2 = np.zeros((h, cache.n))
    for l, blk in enumerate(model.blocks):
        dw1 = v[2 * l * size : (2 * l + 1) * size].reshape(h, dp, order="F")
        dw2 = v[(2 * l + 1) * size : (2 * l + 2) * size].reshape(h, dp, order="F")
        s1p = revnet._act_grad(cache.a1[l], model.activation)
        s2p = revnet._act_grad(cache.a2[l], model.activation)
        t1 = t1 + dw1 @ cache.s1[l] + blk.w1 @ (s1p * (blk.va @ t2))
        t2 = t2 + dw2 @ cache.s2[l] + blk.w2 @ (s2p * (blk.vb @ t1))
    return np.vstack([t1, t2])


def check_right_inverse_identity(model, x, n_vectors=50, tol=1e-7, seed=0):
    """``|| J (J^- v) - v || / ||v||`` for random ``v`` using the optimizer's right inverse."""
    jac = dense_jacobian(model, x)
    _, cache = revnet.forward(model, x)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_vectors):
        v = rng.normal(size=(model.d, x.shape[1]))
        dt = right_inverse_apply(model, cache, v)
        worst = max(worst, np.linalg.norm(jac.j @ dt - _vecF(v)) / np.linalg.norm(v))
    dense = dense_right_inverse(model, x)
    dense_err = np.abs(jac.j @ dense - np.eye(jac.j.shape[0])).max()
    return CheckReport("right_inverse_identity", describe(model, x.shape[1]),
                       {"max_rel_residual": worst, "dense_max_abs": dense_err},
                       bool(worst <= tol and dense_err <= 1e-8))


def check_layerwise_mpp(model, x, tol=1e-6, b_tol=1e-8):
    """Layer-wise right inverse of every ``J_l`` equals its Moore-Penrose pseudoinverse."""
    jac = dense_jacobian(model, x)
    _, cache = revnet.forward(model, x)
    lw = layerwise_right_inverse_matrix(model, cache) * model.n_blocks
    size = 2 * model.half * model.d_prime
    dev, dev_dense, b_res = [], [], []
    for l in range(model.n_blocks):
        j_l = jac.layer(model, l)
        j_p = np.linalg.pinv(j_l)
        mine = lw[l * size : (l + 1) * size]
        dense = dense_layer_right_inverse(model, cache, l)
        dev.append(np.linalg.norm(mine - j_p) / np.linalg.norm(j_p))
        dev_dense.append(np.linalg.norm(dense - j_p) / np.linalg.norm(j_p))
        a, b, _ = block_local_jacobian(model, cache, l)
        b_res.append(np.abs(b - b @ np.linalg.pinv(a) @ a).max())
    res = {"rel_dev": dev, "dense_rel_dev": dev_dense, "b_projection_max_abs": b_res}
    ok = max(dev) <= tol and max(dev_dense) <= tol and max(b_res) <= b_tol
    return CheckReport("layerwise_mpp", describe(model, x.shape[1]), res, bool(ok))


def check_gn_vs_dense(model, x, y, alpha=0.5, tol=1e-8):
    """One layer-wise GN step vs ``theta - alpha * J^- eps`` with a dense ``J^-``."""
    f, _ = revnet.forward(model, x)
    eps = gn_error("square", f, y, model.d)
    expected = model.flat_params() - alpha * dense_right_inverse(model, x) @ _vecF(eps)
    m = model.copy()
    gn_step(m, x, y, "square", GNConfig(lr=alpha, pinv=EXACT))
    diff = np.abs(m.flat_params() - expected).max()
    return CheckReport("gn_vs_dense", describe(model, x.shape[1]) | {"alpha": alpha},
                       {"max_abs_diff": diff}, bool(diff <= tol))


def _is_spd(h):
    if not np.allclose(h, h.T, rtol=0, atol=1e-12 * max(1.0, np.abs(h).max())):
        return False
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        return False
    return True


def random_spd(k, seed=0, cond=10.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(k, k)))
    return (q * np.geomspace(1.0, cond, k)) @ q.T


def check_projection(model, x, h, tol=1e-6):
    """``A = H J (J^T H J)^+ J^T`` is idempotent with eigenvalues in ``{0, 1}``."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (model.d * x.shape[1],) * 2 or not _is_spd(h):
        raise ValueError("h must be a symmetric positive definite (n*d x n*d) matrix")
    j = dense_jacobian(model, x).j
    g = j.T @ h @ j
    a = h @ j @ np.linalg.pinv(g, rcond=1e-10, hermitian=True) @ j.T
    idem = np.linalg.norm(a @ a - a) / np.linalg.norm(a)
    ev = np.linalg.eigvals(a)
    ev_dist = float(np.max(np.minimum(np.abs(ev), np.abs(ev - 1.0))))
    rank_a = int(np.linalg.matrix_rank(a, tol=1e-8 * np.abs(a).max()))
    rank_j = int(np.linalg.matrix_rank(j))
    res = {"idempotence_rel": idem, "eig_max_dist": ev_dist, "rank_A": rank_a, "rank_J": rank_j,
           "identity_dev": float(np.abs(a - np.eye(a.shape[0])).max())}
    params = describe(model, x.shape[1]) | {"p": model.n_params,
                                            "overparameterized": model.n_params >= j.shape[0]}
    return CheckReport("projection", params, res,
                       bool(idem <= tol and ev_dist <= tol and rank_a == rank_j))


def check_newton_function_space(model, x, y, h=None, alpha=1.0, tol=1e-7):
    """GGN parameter step equals the pulled-back function-space Newton step.

    For a quadratic loss ``0.5 (f-y)^T H (f-y)`` the parameter-space step
    ``(J^T H J)^+ J^T H r`` is compared with ``J^+ r`` (``r = f - y``).  With
    ``H = I`` and a single block it is also compared with :func:`gn_step`.
    """
    f, _ = revnet.forward(model, x)
    r = _vecF(f - y)
    k = r.size
    h = np.eye(k) if h is None else np.asarray(h, dtype=np.float64)
    if not _is_spd(h):
        raise ValueError("h must be symmetric positive definite")
    j = dense_jacobian(model, x).j
    grad_theta = j.T @ (h @ r)
    ggn = alpha * np.linalg.pinv(j.T @ h @ j, rcond=1e-10, hermitian=True) @ grad_theta
    func = alpha * np.linalg.pinv(j) @ np.linalg.solve(h, h @ r)
    scale = max(np.linalg.norm(func), 1e-300)
    res = {"ggn_vs_function_rel": np.linalg.norm(ggn - func) / scale if r.any() else 0.0}
    ok = res["ggn_vs_function_rel"] <= tol
    if model.n_blocks == 1 and np.allclose(h, np.eye(k)):
        m = model.copy()
        gn_step(m, x, y, "square", GNConfig(lr=alpha, pinv=EXACT))
        step = model.flat_params() - m.flat_params()
        res["gn_step_rel"] = np.linalg.norm(step - func) / scale if r.any() else float(
            np.linalg.norm(step))
        ok = ok and res["gn_step_rel"] <= tol
    return CheckReport("newton_function_space", describe(model, x.shape[1]), res, bool(ok))


def _residual(model, x, y):
    return revnet.forward(model, x)[0] - y


def gn_trajectories(model, x, y, alpha, steps):
    """Residual norms of the layer-wise and dense-pseudoinverse GN trajectories."""
    m1, m2 = model.copy(), model.copy()
    r1 = [np.linalg.norm(_residual(m1, x, y))]
    r2 = list(r1)
    gap = [0.0]
    for _ in range(steps):
        gn_step(m1, x, y, "square", GNConfig(lr=alpha, pinv=EXACT))
        j = dense_jacobian(m2, x, fd_columns=0).j
        e2 = _vecF(_residual(m2, x, y))
        m2.set_flat_params(m2.flat_params() - alpha * np.linalg.pinv(j) @ e2)
        e1 = _residual(m1, x, y)
        e2 = _residual(m2, x, y)
        if not (np.all(np.isfinite(e1)) and np.all(np.isfinite(e2))):
            raise FloatingPointError("a GN trajectory diverged")
        r1.append(np.linalg.norm(e1))
        r2.append(np.linalg.norm(e2))
        gap.append(np.linalg.norm(e1 - e2))
    return np.array(r1), np.array(r2), np.array(gap)


def check_right_inverse_equivalence(model, x, y, alphas=(0.2, 0.1, 0.05), steps=20,
                                    min_slope=0.7):
    """Loss trajectories of two right inverses differ by ``O(alpha)``.

    The gap is ``max_k ||eps_k^(1) - eps_k^(2)||`` relative to ``||eps_0||``;
    the slope of log-gap against log-alpha must reach ``min_slope``.
    """
    gaps, contraction = [], []
    for alpha in alphas:
        r1, r2, gap = gn_trajectories(model, x, y, alpha, steps)
        gaps.append(float(gap.max() / r1[0]))
        ref = r1[0] * (1 - alpha) ** np.arange(steps + 1)
        contraction.append(float(max(np.abs(r1 / ref - 1).max(), np.abs(r2 / ref - 1).max())))
    if min(gaps) <= 0.0:
        slope = float("inf")
    else:
        slope = float(np.polyfit(np.log(alphas), np.log(gaps), 1)[0])
    res = {"alphas": list(alphas), "rel_gap": gaps, "slope": slope,
           "contraction_max_rel_dev": contraction}
    return CheckReport("right_inverse_equivalence",
                       describe(model, x.shape[1]) | {"steps": steps}, res,
                       bool(slope >= min_slope))


def teacher_problem(d=8, d_prime=16, n_blocks=2, n=4, seed=0):
    """Student at the default init plus targets from a seeded teacher."""
    teacher = revnet.init(d, d_prime, n_blocks, d, seed=seed + 1000, scheme="xavier")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(d, n))
    y = revnet.forward(teacher, x)[0] + 0.01 * rng.normal(size=(d, n))
    return revnet.init(d, d_prime, n_blocks, d, seed=seed), x, y


def run_suite(level="fast", seed=0):
    """Run the oracle checks; returns a list of :class:`CheckReport`."""
    if level not in ("fast", "full"):
        raise ValueError(f"unknown verification level {level!r}")
    rng = np.random.default_rng(seed)
    n_inst = 4 if level == "fast" else 20
    reports = []
    for _ in range(n_inst):
        model, x = random_instance(rng)
        y = x + rng.normal(size=x.shape)
        reports.append(check_jacobian_consistency(model, x))
        reports.append(check_right_inverse_identity(model, x, n_vectors=10 if level == "fast" else 50))
        reports.append(check_layerwise_mpp(model, x))
        reports.append(check_gn_vs_dense(model, x, y))
    over = revnet.init(4, 8, 1, 4, seed=seed, scheme="xavier")
    x_over = rng.normal(size=(4, 2))
    under = revnet.init(4, 2, 1, 4, seed=seed, scheme="xavier")
    x_under = rng.normal(size=(4, 4))
    for model, x in ((over, x_over), (under, x_under)):
        k = model.d * x.shape[1]
        reports.append(check_projection(model, x, np.eye(k)))
        reports.append(check_projection(model, x, random_spd(k, seed)))
    y_over = x_over + rng.normal(size=x_over.shape)
    reports.append(check_newton_function_space(over, x_over, y_over))
    reports.append(check_newton_function_space(over, x_over, y_over,
                                               random_spd(x_over.size, seed + 1)))
    if level == "full":
        reports.append(check_right_inverse_equivalence(*teacher_problem(seed=seed)))
    return reports
