import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from revgn import analysis, oracle, revnet
from revgn.data import Dataset


def probe_model(d=6, dp=8, L=2, d_y=3, m=5, seed=0):
    model = revnet.init(d, dp, L, d_y, seed=seed, scheme="xavier")
    x = np.random.default_rng(seed).normal(size=(d, m))
    return model, analysis.ProbeSet(x, d_y)


def test_ntk_matches_dense_jacobian():
    model, probe = probe_model()
    j = oracle.dense_jacobian(model, probe.x).j
    # dense rows are column-major over (d, m); keep logit rows, class-major
    rows = [c + model.d * s for c in range(probe.d_y) for s in range(probe.m)]
    jl = j[rows]
    np.testing.assert_allclose(analysis.ntk(model, probe), jl @ jl.T, atol=1e-12)


def test_ntk_psd_and_duplicate_samples():
    model, probe = probe_model()
    x = np.hstack([probe.x, probe.x[:, :1]])
    theta = analysis.ntk(model, analysis.ProbeSet(x, probe.d_y))
    assert np.linalg.eigvalsh(theta).min() > -1e-10
    m = x.shape[1]
    for c in range(probe.d_y):
        np.testing.assert_allclose(theta[c * m], theta[c * m + m - 1], atol=1e-12)


def test_ntk_size_limit():
    model = revnet.init(4, 8, 1, 4, seed=0)
    with pytest.raises(ValueError):
        analysis.ntk(model, analysis.ProbeSet(np.zeros((4, 600)), 4))


def test_ntk_similarity_and_rate():
    model, probe = probe_model()
    t0 = analysis.ntk(model, probe)
    assert analysis.ntk_similarity(t0, t0) == pytest.approx(1.0)
    assert analysis.ntk_similarity(3.0 * t0, t0) == pytest.approx(1.0)
    assert analysis.ntk_rate_of_change(t0, t0) == 0.0
    assert analysis.ntk_rate_of_change(2 * t0, t0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        analysis.ntk_rate_of_change(t0, np.zeros_like(t0))


reps = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s).normal(size=(5, 12)))


@given(reps, st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_cka_invariances(x, seed, scale):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=(7, 12))
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    base = analysis.linear_cka(x, y)
    assert 0.0 <= base <= 1.0
    assert analysis.linear_cka(q @ x * scale, y) == pytest.approx(base, abs=1e-10)
    assert analysis.linear_cka(x + rng.normal(size=(5, 1)), y) == pytest.approx(base, abs=1e-10)
    assert analysis.linear_cka(y, x) == pytest.approx(base, abs=1e-10)
    assert analysis.linear_cka(x, x) == pytest.approx(1.0)


def test_cka_errors():
    with pytest.raises(ValueError):
        analysis.linear_cka(np.ones((3, 4)), np.random.default_rng(0).normal(size=(3, 4)))
    with pytest.raises(ValueError):
        analysis.linear_cka(np.ones((3, 1)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        analysis.linear_cka(np.ones((3, 4)), np.ones((3, 5)))


def test_weight_cosine_and_compare():
    model, probe = probe_model()
    moved = model.copy()
    moved.set_weights([-w for w in model.weights()])
    assert analysis.weight_cosine(model, model) == pytest.approx([1.0] * 4)
    assert analysis.weight_cosine(moved, model) == pytest.approx([-1.0] * 4)
    metrics, theta = analysis.compare_to_reference(model, model, probe)
    assert metrics["ntk_similarity"] == pytest.approx(1.0)
    assert metrics["cka"] == pytest.approx([1.0, 1.0])
    assert metrics["ntk_rate"] is None
    metrics2, _ = analysis.compare_to_reference(model, model, probe, theta_prev=theta)
    assert metrics2["ntk_rate"] == 0.0


def test_minibatch_loss_change():
    assert analysis.minibatch_loss_change(2.0, 1.0) == -50.0
    assert analysis.minibatch_loss_change(1.0, 1.5) == 50.0
    with pytest.raises(ValueError):
        analysis.minibatch_loss_change(0.0, 1.0)


def test_probe_and_block_representations():
    ds = Dataset(np.random.default_rng(0).normal(size=(4, 30)), np.zeros(30, dtype=int), "t", 2)
    p1 = analysis.make_probe(ds, 10, seed=1)
    p2 = analysis.make_probe(ds, 10, seed=1)
    np.testing.assert_array_equal(p1.x, p2.x)
    with pytest.raises(ValueError):
        analysis.make_probe(ds, 31)
    model = revnet.init(4, 8, 2, 2, seed=0)
    rep = analysis.block_representations(model, p1, 1)
    np.testing.assert_allclose(rep, revnet.forward(model, p1.x)[0])
    with pytest.raises(IndexError):
        analysis.block_representations(model, p1, 2)
