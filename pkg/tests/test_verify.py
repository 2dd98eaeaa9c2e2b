import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rome import models as mdl
from rome import verify as vf
from rome.nn import ComputationGraph
from rome.nn.layers import dense

NORMS = [1, 2, np.inf]


def mlp(rng, d_in=6, hidden=8, d_out=3, depth=2):
    g = ComputationGraph({"x": (d_in,)})
    h, width = "x", d_in
    for _ in range(depth):
        h = dense(g, h, width, hidden, rng)
        g.nodes[-1].params["b"].data[:] = rng.normal(0, 0.3, hidden)
        h = g.add("relu", h)
        width = hidden
    dense(g, h, width, d_out, rng)
    return g


def linear_graph(W, b):
    g = ComputationGraph({"x": (W.shape[1],)})
    g.add("linear", "x", {"W": W, "b": b})
    return g


def test_dual_exponent():
    assert vf.dual_exponent(1) == np.inf
    assert vf.dual_exponent(2) == 2
    assert vf.dual_exponent(np.inf) == 1
    with pytest.raises(ValueError):
        vf.dual_exponent(3)


def test_relax_relu_examples():
    r = vf.relax_relu([1.0, -3.0, -1.0, -2.0], [2.0, -1.0, 3.0, 1.0])
    np.testing.assert_allclose(r.upper_slope, [1, 0, 0.75, 1 / 3])
    np.testing.assert_allclose(r.upper_icpt, [0, 0, 0.75, 2 / 3])
    np.testing.assert_allclose(r.lower_slope, [1, 0, 1, 0])
    with pytest.raises(ValueError):
        vf.relax_relu([1.0], [0.0])


@given(st.floats(-5, 5), st.floats(0, 5))
def test_relu_relaxation_is_sound(lower, width):
    upper = lower + width
    r = vf.relax_relu([lower], [upper])
    x = np.linspace(lower, upper, 100)
    y = np.maximum(x, 0)
    assert np.all(r.lower_slope * x + r.lower_icpt <= y + 1e-12)
    assert np.all(r.upper_slope * x + r.upper_icpt >= y - 1e-12)


def test_unsupported_op_is_rejected(rng):
    g = ComputationGraph({"x": (4,)})
    g.add("softmax", "x")
    with pytest.raises(vf.UnsupportedOpError):
        vf.propagate(g, vf.InputRegion(np.zeros(4), 1.0))


@pytest.mark.parametrize("p", NORMS)
def test_affine_graph_is_exact(rng, p):
    W, b = rng.standard_normal((3, 5)), rng.standard_normal(3)
    g = linear_graph(W, b)
    m = vf.propagate(g, vf.InputRegion(rng.standard_normal(5), 0.7, p))
    assert m.exact
    rep = vf.distortion_bound(g, rng.standard_normal(5), 0.7, p)
    np.testing.assert_allclose(rep.B, 2 * 0.7 * np.linalg.norm(W, ord=vf.dual_exponent(p), axis=1),
                               atol=1e-9)


def test_concretize_examples():
    W = np.array([[1.0, -2.0]])
    m = vf.LinearBoundMap(W, np.zeros(1), W, np.zeros(1))
    up, lo = vf.concretize(m, vf.InputRegion(np.zeros(2), 1.0, np.inf))
    assert up[0] == pytest.approx(3.0) and lo[0] == pytest.approx(-3.0)
    W = np.array([[3.0, 4.0]])
    m = vf.LinearBoundMap(W, np.zeros(1), W, np.zeros(1))
    assert vf.concretize(m, vf.InputRegion(np.zeros(2), 1.0, 2))[0][0] == pytest.approx(5.0)
    c = np.array([1.0, 1.0])
    up, lo = vf.concretize(m, vf.InputRegion(c, 0.0, 2))
    assert up[0] == lo[0] == pytest.approx(7.0)


def test_bounds_sound_on_random_networks():
    rng = np.random.default_rng(11)
    total = 0
    for trial in range(50):
        g = mlp(rng, depth=1 + trial % 3)
        F = rng.standard_normal(6)
        for p in NORMS:
            for rho in (0.01, 0.1, 1.0):
                total += vf.count_violations(g, vf.InputRegion(F, rho, p), n=10_000,
                                             rng=np.random.default_rng(trial))
    assert total == 0


def test_bounds_sound_on_classifier(rng):
    cls = mdl.build_classifier(mdl.ModelConfig(classes=4), (3, 4, 4), rng)
    F = rng.standard_normal(48)
    for p in NORMS:
        assert vf.count_violations(cls.graph, vf.InputRegion(F, 0.5, p), n=2000, rng=rng) == 0
    union = vf.InputRegion(np.zeros(48), 0.5, 2, center_radius=2.0)
    assert vf.count_violations(cls.graph, vf.InputRegion(F / np.linalg.norm(F) * 2.0, 0.5, 2),
                               n=2000, rng=rng, bmap=vf.propagate(cls.graph, union)) == 0


@pytest.mark.parametrize("p", NORMS)
def test_concretisation_matches_dual_norm(rng, p):
    w = rng.standard_normal(3)
    m = vf.LinearBoundMap(w[None], np.zeros(1), w[None], np.zeros(1))
    rho = 0.8
    up = vf.concretize(m, vf.InputRegion(np.zeros(3), rho, p))[0][0]
    q = vf.dual_exponent(p)
    assert up == pytest.approx(rho * np.linalg.norm(w, ord=q))
    pts = vf.sample_ball(np.zeros(3), rho, p, 100_000, rng, boundary_fraction=1.0)
    assert np.linalg.norm(pts, ord=p, axis=1).max() <= rho * (1 + 1e-9)
    values = pts @ w
    assert values.max() <= up + 1e-9
    if p == 2:
        assert values.max() >= up * (1 - 0.005)
    # Hölder's equality case attains the bound exactly
    if p == 1:
        d = np.zeros(3)
        d[np.argmax(np.abs(w))] = rho * np.sign(w[np.argmax(np.abs(w))])
    elif p == 2:
        d = rho * w / np.linalg.norm(w)
    else:
        d = rho * np.sign(w)
    assert d @ w == pytest.approx(up)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(1.0, 3.0))
def test_distortion_grows_with_radius(seed, rho, factor):
    rng = np.random.default_rng(seed)
    g = mlp(rng)
    F = rng.standard_normal(6)
    small = vf.distortion_bound(g, F, rho).B
    large = vf.distortion_bound(g, F, rho * factor).B
    assert np.all(large >= small - 1e-9)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_bound_over_all_signals_dominates_each_signal(seed):
    rng = np.random.default_rng(seed)
    g = mlp(rng)
    kP = 4.0
    worst = vf.distortion_bound_max_over_F(g, kP, 0.3)
    for _ in range(5):
        F = rng.standard_normal(6)
        F *= np.sqrt(kP) * rng.random() / np.linalg.norm(F)
        assert np.all(vf.distortion_bound(g, F, 0.3).B <= worst + 1e-9)


def test_robustness_examples():
    g = linear_graph(np.eye(1), np.zeros(1))
    assert vf.robustness(g, p=2) == pytest.approx(-2.0)
    g = linear_graph(np.zeros((2, 3)), np.zeros(2))
    assert vf.robustness(g, p=2) == 0.0


@pytest.mark.parametrize("p", NORMS)
def test_robustness_is_non_positive(rng, p):
    assert vf.robustness(mlp(rng), p=p) <= 0.0


def test_ensemble_bounds_are_sound(rng):
    nets = [mlp(rng) for _ in range(3)]
    region = vf.InputRegion(rng.standard_normal(6), 0.5, 2)
    maps = [vf.propagate(g, region) for g in nets]
    p_d = np.array([0.2, 0.5, 0.3])
    up, lo = vf.ensemble_bounds(maps, p_d, region)
    F = vf.sample_ball(region.center, region.rho, 2, 5000, rng)
    out = sum(w * g.run(F) for w, g in zip(p_d, nets))
    assert np.all(out <= up + 1e-9) and np.all(out >= lo - 1e-9)
    with pytest.raises(ValueError):
        vf.ensemble_bounds(maps, p_d[:2], region)


def test_ensemble_never_worse_than_weighted_members():
    """The detector-weighted map is at least as tight as the weighted member certificates."""
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(2, 5))
        nets = [mlp(rng, d_in=4, hidden=6) for _ in range(n)]
        region = vf.InputRegion(rng.standard_normal(4), float(rng.uniform(0.05, 1.0)), 2)
        maps = [vf.propagate(g, region) for g in nets]
        p_d = rng.dirichlet(np.ones(n))
        B_e, r_e = vf.ensemble_direct(maps, p_d, region)
        B = np.array([vf.distortion_from_map(m, region).B for m in maps])
        r = np.array([vf.robustness_from_map(m, 2) for m in maps])
        assert np.all(B_e <= p_d @ B + 1e-9)
        assert r_e >= p_d @ r - 1e-9


def test_ensemble_distortion_cases():
    B = [np.array([1.0]), np.array([3.0]), np.array([5.0])]
    r = [-1.0, -3.0, -5.0]
    assert vf.ensemble_distortion(B, r, [0.0, 1.0, 0.0], "confident") == (np.array([3.0]), -3.0)
    Bc, rc = vf.ensemble_distortion(B, r, [0.0, 0.5, 0.5], "confused")
    np.testing.assert_allclose(Bc, 4.0)
    assert rc == pytest.approx(-4.0)
    Bg, rg = vf.ensemble_distortion(B, r, [0.7, 0.3, 0.0], "general")
    np.testing.assert_allclose(Bg, 1.6)
    assert rg == pytest.approx(-1.6)
    with pytest.raises(vf.CaseMismatchError):
        vf.ensemble_distortion(B, r, [0.4, 0.3, 0.3], "confident")
    with pytest.raises(vf.CaseMismatchError):
        vf.ensemble_distortion(B, r, [0.8, 0.2, 0.0], "confused")
    with pytest.raises(vf.CaseMismatchError):
        vf.ensemble_distortion(B, r, [0.5, 0.0, 0.5], "general")
    with pytest.raises(ValueError):
        vf.ensemble_distortion(B, r, [1.0, 0.0, 0.0], "other")
