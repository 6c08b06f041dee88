import logging

import numpy as np
import pytest

from revgn import losses, optim, revnet
from revgn.linalg import EXACT, Truncate


def problem(d=8, dp=32, L=2, n=4, seed=0):
    m = revnet.init(d, dp, L, d, seed=seed, scheme="xavier")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(d, n))
    return m, x, x + 0.1 * rng.normal(size=(d, n))


def test_gn_step_contracts_error_linearly():
    m, x, y = problem()
    r0 = np.linalg.norm(revnet.forward(m, x)[0] - y)
    optim.gn_step(m, x, y, "square", optim.GNConfig(lr=1e-3, pinv=EXACT))
    r1 = np.linalg.norm(revnet.forward(m, x)[0] - y)
    assert r1 / r0 == pytest.approx(1 - 1e-3, abs=1e-6)


def test_gn_uses_single_precomputed_cache():
    m, x, y = problem()
    _, cache = revnet.forward(m, x)
    ref = m.copy()
    optim.gn_step(m, x, y, "square", optim.GNConfig(lr=0.5, pinv=EXACT), cache=cache)
    eps = optim.gn_error("square", cache.xL, y, ref.d)
    deltas, _ = optim.gn_directions(ref, cache, eps, EXACT)
    expected = [w - 0.25 * dw for w, dw in zip(ref.weights(), deltas)]
    for a, b in zip(m.weights(), expected):
        np.testing.assert_allclose(a, b, atol=1e-13)
    with pytest.raises(revnet.StaleCacheError):
        optim.gn_step(m, x, y, "square", optim.GNConfig(), cache=cache)


def test_rank_zero_aborts():
    m, x, y = problem()
    with pytest.raises(optim.GNStepError):
        optim.gn_step(m, x, y, "square", optim.GNConfig(pinv=Truncate(0.5, 1e6)))


def test_batch_larger_than_bottleneck():
    m, x, y = problem(dp=8, n=12)
    with pytest.raises(ValueError, match="exceeds bottleneck"):
        optim.gn_step(m, x, y, "square", optim.GNConfig())


def test_no_bottleneck_large_batch_logs_and_proceeds(caplog):
    m = revnet.init(8, 0, 2, 8, no_bottleneck=True, scheme="xavier")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 12))
    before = m.flat_params()
    with caplog.at_level(logging.INFO, logger="revgn.optim"):
        optim.gn_step(m, x, x * 0.9, "square", optim.GNConfig())
    assert "exceeds bottleneck" in caplog.text
    assert not np.array_equal(before, m.flat_params())


def test_gn_weight_decay_scales_weights():
    m, x, y = problem()
    ref = m.copy()
    optim.gn_step(ref, x, y, "square", optim.GNConfig(lr=0.5, pinv=EXACT))
    optim.gn_step(m, x, y, "square", optim.GNConfig(lr=0.5, pinv=EXACT, weight_decay=0.1))
    for a, b in zip(m.weights(), ref.weights()):
        np.testing.assert_allclose(a, b * 0.95, atol=1e-14)


def test_sgd_matches_manual_gradient():
    m, x, y = problem()
    _, cache = revnet.forward(m, x)
    eps = losses.functional_gradient("square", cache.xL, y)
    grads = revnet.vjp(m, cache, eps)
    expected = [w - 0.1 * (g + 0.01 * w) for w, g in zip(m.weights(), grads)]
    optim.SGD(optim.SGDConfig(0.1, 0.01)).step(m, x, y, "square", cache)
    for a, b in zip(m.weights(), expected):
        np.testing.assert_allclose(a, b)


def test_adam_first_step_moves_by_lr():
    m, x, y = problem()
    before = m.weights()
    opt = optim.Adam(optim.AdamConfig(lr=1e-3))
    opt.step(m, x, y, "square")
    for a, b in zip(m.weights(), before):
        moved = np.abs(a - b)
        big = moved > 1e-6
        np.testing.assert_allclose(moved[big], 1e-3, rtol=1e-3)
    assert opt.state.step == 1


def test_adam_reference_two_steps():
    m, x, y = problem()
    ref = m.copy()
    cfg = optim.AdamConfig(lr=1e-2, beta1=0.8, beta2=0.9, eps_hat=1e-6, weight_decay=0.1)
    opt = optim.Adam(cfg)
    mom = [np.zeros_like(w) for w in ref.weights()]
    vel = [np.zeros_like(w) for w in ref.weights()]
    for t in (1, 2):
        _, cache = revnet.forward(ref, x)
        g = revnet.vjp(ref, cache, losses.functional_gradient("square", cache.xL, y))
        new = []
        for i, w in enumerate(ref.weights()):
            mom[i] = 0.8 * mom[i] + 0.2 * g[i]
            vel[i] = 0.9 * vel[i] + 0.1 * g[i] ** 2
            mh, vh = mom[i] / (1 - 0.8 ** t), vel[i] / (1 - 0.9 ** t)
            new.append(w - 1e-2 * mh / (np.sqrt(vh) + 1e-6) - 1e-2 * 0.1 * w)
        ref.set_weights(new)
        opt.step(m, x, y, "square")
    for a, b in zip(m.weights(), ref.weights()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_config_validation():
    for bad in (lambda: optim.GNConfig(lr=0), lambda: optim.SGDConfig(lr=-1),
                lambda: optim.SGDConfig(weight_decay=-1), lambda: optim.AdamConfig(beta1=1.0),
                lambda: optim.AdamConfig(eps_hat=0)):
        with pytest.raises(ValueError):
            bad()


def test_switch_schedule():
    spec = [(0, "adam"), (10, "gn")]
    assert optim.switch_schedule(0, spec) == "adam"
    assert optim.switch_schedule(9, spec) == "adam"
    assert optim.switch_schedule(10, spec) == "gn"
    with pytest.raises(ValueError):
        optim.switch_schedule(3, [(0, "adam"), (0, "gn")])
    with pytest.raises(ValueError):
        optim.switch_schedule(3, [])


def test_lr_grid():
    grid = optim.lr_grid(1.0)
    assert grid[0] == 1e-5 and grid[-1] == 1.0
    np.testing.assert_allclose(np.array(grid[1:-1]) / np.array(grid[:-2]), 3.0)
    assert grid[-2] < 1.0


def test_make_pinv_policy():
    assert optim.make_pinv_policy("exact") == EXACT
    assert optim.make_pinv_policy("damp", frac=0.05).frac == 0.05
    assert optim.make_pinv_policy("noise", seed=4).seed == 4
    with pytest.raises(ValueError):
        optim.make_pinv_policy("ridge")


def test_cross_entropy_gn_step_reduces_loss():
    m = revnet.init(8, 32, 2, 3, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 6))
    labels = rng.integers(0, 3, size=6)
    rep = optim.GaussNewton(optim.GNConfig(lr=0.5)).step(m, x, labels, "cross_entropy")
    after = losses.loss_value("cross_entropy", revnet.logits(revnet.forward(m, x)[0], 3), labels)
    assert after < rep.loss_before
    assert len(rep.ranks) == 2 and len(rep.update_norms) == 4
