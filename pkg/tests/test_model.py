import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from phononet.errors import ContractError
from phononet.model import (
    EffectiveModel,
    Geometry,
    PhysicsConfig,
    lattice_edges,
    oracle_effective_model,
    oracle_jacobian,
    random_geometry,
    structural_mask,
)

CFG = PhysicsConfig()


# ---------------------------------------------------------------- oracle values


def test_uniform_half_dimer_coupling_is_cross_term_only():
    # tanh(0) = 0 so only eps * d_a * d_b = 0.02 k0 * 0.25 survives
    m = oracle_effective_model(Geometry.uniform(1, 2, 0.5))
    assert m.K[0, 1] == pytest.approx(-0.005 * CFG.k0, rel=1e-14)
    assert m.K[0, 0] == pytest.approx(CFG.k0 * (1 - 0.55 * 0.25 + 0.005), rel=1e-14)
    np.testing.assert_allclose(np.diag(m.M), [0.925, 0.925], rtol=1e-15)


def test_single_site_undrilled_frequency_is_f0():
    m = oracle_effective_model(Geometry(np.zeros((1, 1)), np.zeros((1, 0)), np.zeros((0, 1))))
    assert m.eigenfrequencies()[0] == pytest.approx(68.5e3, rel=1e-12)
    assert math.sqrt(CFG.k0 / CFG.m0) / (2 * math.pi) == pytest.approx(68.5e3, rel=1e-14)


def test_onsite_stiffness_decreases_with_hole_size():
    k = [oracle_effective_model(Geometry(np.full((1, 1), d), np.zeros((1, 0)), np.zeros((0, 1)))).K[0, 0] for d in (0.1, 0.9)]
    assert k[1] < k[0]


def test_frozen_oracle_2x2():
    m = oracle_effective_model(random_geometry(2, 2, seed=3))
    np.testing.assert_allclose(m.K[0], [206881592195.28726, 22077558001.02148, 1206888065.8903995, 0.0], rtol=1e-12)
    np.testing.assert_allclose(np.diag(m.M), [0.9951548779878497, 0.9792288668255701, 0.8215996826716205, 0.9011758544212518], rtol=1e-13)
    np.testing.assert_allclose(m.eigenfrequencies(), [62989.414962298695, 67365.74190072327, 71456.03406948065, 78941.88581116147], rtol=1e-10)


def test_physics_constants():
    assert CFG.k0 == pytest.approx(185242605004.04614, rel=1e-14)
    assert CFG.damping_rate == pytest.approx(2 * math.pi * 68.5e3 / 1000, rel=1e-14)
    assert CFG.eps == pytest.approx(0.02 * CFG.k0)


# ---------------------------------------------------------------- random geometry


def test_random_geometry_deterministic_and_frozen():
    a, b = random_geometry(7, 7, seed=1), random_geometry(7, 7, seed=1)
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())
    np.testing.assert_allclose(a.d[0, :3], [0.510639462230231, 0.9054173266933417, 0.17974365144767035], rtol=0, atol=0)
    np.testing.assert_allclose(a.h[0, :2], [0.7876640472073493, 0.6649582154029314], rtol=0, atol=0)


def test_random_geometry_counts():
    g = random_geometry(7, 7, seed=0)
    assert (g.d.size, g.h.size, g.v.size) == (49, 42, 42)


def test_random_geometry_uniform_ks():
    p = np.concatenate([random_geometry(7, 7, seed=s).to_vector() for s in range(80)])[:10_000]
    assert p.min() >= 0.05 and p.max() <= 0.95
    assert stats.kstest(p, stats.uniform(0.05, 0.9).cdf).pvalue > 0.01


def test_random_geometry_rejects_empty():
    with pytest.raises(ContractError):
        random_geometry(0, 3)


# ---------------------------------------------------------------- geometry container


def test_geometry_clamps_and_shapes():
    g = Geometry(np.array([[1.5, -0.2]]), np.array([[0.3]]), np.zeros((0, 2)))
    np.testing.assert_array_equal(g.d, [[1.0, 0.0]])
    with pytest.raises(ContractError):
        Geometry(np.array([[np.nan]]), np.zeros((1, 0)), np.zeros((0, 1)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_geometry_roundtrips(rows, cols, seed):
    g = random_geometry(rows, cols, seed=seed)
    np.testing.assert_array_equal(Geometry.from_vector(g.to_vector(), g.shape).to_vector(), g.to_vector())
    np.testing.assert_array_equal(Geometry.from_csv(g.to_csv()).to_vector(), g.to_vector())
    np.testing.assert_array_equal(Geometry.from_dict(g.to_dict()).to_vector(), g.to_vector())


def test_from_vector_length_checked():
    with pytest.raises(ContractError):
        Geometry.from_vector(np.zeros(5), (2, 2))


# ---------------------------------------------------------------- invariants


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_oracle_invariants(rows, cols, seed):
    m = oracle_effective_model(random_geometry(rows, cols, seed=seed))
    m.check()
    assert not np.any(m.K[~structural_mask((rows, cols))])
    lam = np.linalg.eigvals(np.linalg.solve(m.M, m.K))
    assert np.all(lam.real > 0)


def test_edges_count():
    assert len(lattice_edges((3, 4))) == 3 * 3 + 2 * 4


def test_effective_model_contracts():
    with pytest.raises(ContractError):
        EffectiveModel(np.eye(2), np.eye(3), np.zeros((2, 2)), np.ones(2), 0)
    with pytest.raises(ContractError):
        EffectiveModel(np.eye(2), np.eye(2), np.zeros((2, 2)), np.ones(2), 5)
    bad = EffectiveModel(-np.eye(2), np.eye(2), np.zeros((2, 2)), np.ones(2), 0)
    with pytest.raises(ContractError):
        bad.check()


def test_effective_model_dict_roundtrip():
    m = oracle_effective_model(random_geometry(2, 3, seed=4))
    r = EffectiveModel.from_dict(m.to_dict())
    np.testing.assert_array_equal(r.K, m.K)
    assert r.shape == m.shape and r.i_out == m.i_out


# ---------------------------------------------------------------- jacobian


@given(st.integers(0, 2**31))
def test_oracle_jacobian_matches_central_differences(seed):
    g = random_geometry(2, 3, seed=seed, low=0.1, high=0.9)
    dK, dM = oracle_jacobian(g)
    p = g.to_vector()
    h = 1e-6
    for q in range(p.size):
        e = np.zeros_like(p)
        e[q] = h
        mp = oracle_effective_model(Geometry.from_vector(p + e, g.shape))
        mm = oracle_effective_model(Geometry.from_vector(p - e, g.shape))
        fd_K = (mp.K - mm.K) / (2 * h)
        fd_M = (np.diag(mp.M) - np.diag(mm.M)) / (2 * h)
        np.testing.assert_allclose(dK[q], fd_K, rtol=1e-5, atol=1e-6 * CFG.k0)
        np.testing.assert_allclose(dM[q], fd_M, rtol=1e-5, atol=1e-8)
