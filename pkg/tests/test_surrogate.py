from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phononet import surrogate as sg
from phononet.errors import ContractError, DegeneracyError, InsufficientDataError
from phononet.model import EffectiveModel, Geometry, lattice_edges, oracle_effective_model, random_geometry


def bfs_relevant(shape, element, radius=2):
    """Independent enumeration: hole parameters of sites within ``radius`` hops and beams touching them."""
    rows, cols = shape
    n = rows * cols
    adj = [[] for _ in range(n)]
    for a, b, _ in lattice_edges(shape):
        adj[a].append(b)
        adj[b].append(a)
    near = set()
    for src in set(element):
        dist = {src: 0}
        q = deque([src])
        while q:
            u = q.popleft()
            for w in adj[u]:
                if w not in dist:
                    dist[w] = dist[u] + 1
                    q.append(w)
        near |= {u for u, d in dist.items() if d <= radius}
    beams = {j for a, b, j in lattice_edges(shape) if a in near or b in near}
    return sorted(near | beams)


def quadratic_truth(shape, seed):
    """Effective models whose every structural entry is exactly quadratic in its relevant parameters."""
    rng = np.random.default_rng(seed)
    Kel, Mel = sg.structural_elements(shape)
    coefs = {}
    for kind, elems in (("K", Kel), ("M", Mel)):
        for e in elems:
            idx = sg.relevant_params(shape, e)
            k = len(idx)
            C = rng.normal(size=(k, k)) * 0.01
            base = 10.0 if e[0] == e[1] else 0.0
            coefs[kind, e] = (idx, base + rng.normal() * 0.1, rng.normal(size=k) * 0.1, 0.5 * (C + C.T))

    def model(g):
        p = g.to_vector()
        n = shape[0] * shape[1]
        mats = {"K": np.zeros((n, n)), "M": np.zeros((n, n))}
        for (kind, (i, j)), (idx, a, b, C) in coefs.items():
            q = p[idx]
            mats[kind][i, j] = mats[kind][j, i] = a + b @ q + q @ C @ q
        return EffectiveModel(mats["M"], mats["K"], 0.01 * mats["M"], np.ones(n), 0, shape)

    return model


# ---------------------------------------------------------------- relevant parameters


def test_relevant_params_single_site():
    assert sg.relevant_params((1, 1), (0, 0)) == [0]


def test_relevant_params_interior_7x7():
    idx = sg.relevant_params((7, 7), (24, 24))
    holes = [i for i in idx if i < 49]
    assert len(holes) == 13
    assert len(idx) == 13 + 36


def test_corner_has_fewer_params_than_interior():
    assert len(sg.relevant_params((7, 7), (0, 0))) < len(sg.relevant_params((7, 7), (24, 24)))


@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_relevant_params_match_graph_distance(rows, cols, data):
    shape = (rows, cols)
    Kel, _ = sg.structural_elements(shape)
    e = data.draw(st.sampled_from(Kel))
    assert sg.relevant_params(shape, e) == bfs_relevant(shape, e)


def test_non_structural_element_rejected():
    with pytest.raises(ContractError):
        sg.relevant_params((3, 3), (0, 4))


# ---------------------------------------------------------------- fitting


def test_exactly_quadratic_truth_recovered():
    shape = (2, 3)
    truth = quadratic_truth(shape, 0)
    train = [(g, truth(g)) for g in (random_geometry(*shape, seed=s) for s in range(150))]
    s = sg.fit(train, shape, ridge=0.0)
    for seed in range(1000, 1010):
        g = random_geometry(*shape, seed=seed)
        K, M = s.matrices(g)
        t = truth(g)
        assert np.abs(K - t.K).max() < 1e-9 * np.abs(t.K).max()
        assert np.abs(M - t.M).max() < 1e-9 * np.abs(t.M).max()
    for e in s.K + s.M:
        np.testing.assert_array_equal(e.C, e.C.T)


def test_insufficient_data_names_element():
    shape = (2, 2)
    train = [(g, oracle_effective_model(g)) for g in (random_geometry(*shape, seed=s) for s in range(10))]
    with pytest.raises(InsufficientDataError, match="element"):
        sg.fit(train, shape)
    with pytest.raises(InsufficientDataError):
        sg.fit([], shape)


def test_learning_curve_decreases():
    shape = (2, 2)
    rng = np.random.default_rng(0)
    test = [(g, oracle_effective_model(g)) for g in (random_geometry(*shape, seed=rng) for _ in range(100))]
    res = []
    for n in (60, 250, 1000):
        train = [(g, oracle_effective_model(g)) for g in (random_geometry(*shape, seed=rng) for _ in range(n))]
        res.append(sg.frobenius_residual(sg.fit(train, shape), test))
    assert res[0] > res[1] > res[2]


# ---------------------------------------------------------------- predict, jacobian, corrections


@pytest.fixture(scope="module")
def fitted():
    shape = (2, 3)
    train = [(g, oracle_effective_model(g)) for g in (random_geometry(*shape, seed=s) for s in range(300))]
    return sg.fit(train, shape)


def test_predict_contracts(fitted):
    m = sg.predict(fitted, random_geometry(2, 3, seed=7))
    m.check()
    with pytest.raises(ContractError):
        sg.predict(fitted, random_geometry(3, 3, seed=0))


def test_predict_detects_indefinite_mass(fitted):
    g = random_geometry(2, 3, seed=1)
    bad = sg.CorrectionState(np.zeros((6, 6)), -10.0 * np.eye(6), 1.0, 5)
    with pytest.raises(DegeneracyError):
        sg.predict(fitted, g, bad)


def test_jacobian_matches_finite_differences(fitted):
    g = random_geometry(2, 3, seed=11)
    dK, dM = sg.jacobian(fitted, g)
    p = g.to_vector()
    h = 1e-6
    for q in range(p.size):
        e = np.zeros_like(p)
        e[q] = h
        Kp, Mp = fitted.matrices(Geometry.from_vector(p + e, g.shape))
        Km, Mm = fitted.matrices(Geometry.from_vector(p - e, g.shape))
        scale = np.abs(dK).max()
        assert np.abs((Kp - Km) / (2 * h) - dK[q]).max() < 1e-8 * scale
        assert np.abs((np.diag(Mp) - np.diag(Mm)) / (2 * h) - dM[q]).max() < 1e-8 * np.abs(dM).max()


def test_jacobian_zero_outside_relevant_set():
    s = sg.fit([(g, oracle_effective_model(g)) for g in (random_geometry(3, 3, seed=k) for k in range(420))], (3, 3))
    dK, _ = sg.jacobian(s, random_geometry(3, 3, seed=0))
    for e in s.K:
        outside = np.setdiff1d(np.arange(s.n_params), e.idx)
        assert not dK[outside, e.i, e.j].any()


def test_linear_element_has_constant_jacobian():
    e = sg.Element(0, 0, np.array([0, 2]), 1.0, np.array([2.0, -3.0]), np.zeros((2, 2)))
    for p in (np.zeros(3), np.array([0.3, 0.1, 0.9])):
        np.testing.assert_array_equal(e.gradient(p), [2.0, -3.0])


def test_correction_ramp_and_blend_identity(fitted):
    g = random_geometry(2, 3, seed=5)
    st_ = None
    alphas = []
    for _ in range(6):
        st_ = sg.apply_correction(st_, g, oracle_effective_model, fitted)
        alphas.append(st_.alpha)
    assert alphas[0] == pytest.approx(0.2)
    assert alphas[4:] == [1.0, 1.0]
    m = sg.predict(fitted, g, st_)
    t = oracle_effective_model(g)
    np.testing.assert_allclose(m.K, t.K, rtol=0, atol=1e-12 * np.abs(t.K).max())
    np.testing.assert_allclose(m.M, t.M, rtol=0, atol=1e-14)


def test_zero_blend_is_pure_surrogate(fitted):
    g = random_geometry(2, 3, seed=5)
    z = sg.CorrectionState(np.zeros((6, 6)), np.zeros((6, 6)), 0.0, 0)
    np.testing.assert_array_equal(sg.predict(fitted, g, z).K, sg.predict(fitted, g).K)


def test_surrogate_dict_roundtrip(fitted):
    r = sg.SurrogateModel.from_dict(fitted.to_dict())
    g = random_geometry(2, 3, seed=2)
    np.testing.assert_array_equal(r.matrices(g)[0], fitted.matrices(g)[0])
    with pytest.raises(ContractError):
        sg.SurrogateModel.from_dict({**fitted.to_dict(), "version": 99})
