import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phononet.adjoint import (
    adjoint_backward,
    checkpointed_equals_dense,
    default_interval,
    forward_pass,
    gradcheck,
    gradcheck_problem,
    loss_and_gradient,
)
from phononet.errors import ContractError, DomainError
from phononet.loss import loss
from phononet.model import EffectiveModel, PhysicsConfig, oracle_effective_model, random_geometry
from phononet.simulator import LinearDynamics, energies


def oscillator(k, m=1.0, b=0.0):
    return EffectiveModel(np.array([[m]]), np.array([[k]]), np.array([[b]]), np.ones(1), 0)


def tone(n, f=1.0, dt=0.05):
    t = np.arange(n + 1) * dt
    return np.sin(2 * np.pi * f * t) * np.exp(-(((t - t.mean()) / (t[-1] / 5)) ** 2))


# ---------------------------------------------------------------- single oscillator oracle


def test_one_dof_energy_gradient_vs_central_difference():
    k, b, dt, n = 30.0, 0.2, 0.05, 400
    F = tone(n)
    model = oscillator(k, b=b)
    store = forward_pass(LinearDynamics(model), F[None], n, dt)
    g = adjoint_backward(model, F[None], store, [1.0])
    dk = 1e-6 * k
    fd = (energies(oscillator(k + dk, b=b), F, dt, n)[0] - energies(oscillator(k - dk, b=b), F, dt, n)[0]) / (2 * dk)
    assert g.dK[0, 0] == pytest.approx(fd, rel=1e-6)


def test_zero_forcing_zero_gradient():
    model = oracle_effective_model(random_geometry(2, 2, seed=0))
    F = np.zeros((2, 301))
    store = forward_pass(LinearDynamics(model), F, 300)
    g = adjoint_backward(model, F, store, [1.0, -1.0])
    assert not g.dK.any() and not g.dM.any() and not g.dB.any()


# ---------------------------------------------------------------- lattice gradients


def test_gradcheck_3x3_all_parameters():
    model, F, y, theta = gradcheck_problem((3, 3), 2000)
    rows = gradcheck(model, F, y, theta, 2000)
    n_pairs = 9 + 12
    assert len(rows) == n_pairs + 9 + 1
    assert max(r["rel_err"] for r in rows) < 1e-5


def test_tied_damping_mass_gradient():
    phys = PhysicsConfig(Q=50)
    model, F, y, theta = gradcheck_problem((2, 2), 600, seed=3, physics=phys)
    _, _, gv = loss_and_gradient(model, F, y, theta, 600)
    dM = gv.tied_mass(phys.damping_rate)
    a = 1
    h = 1e-6 * model.M[a, a]

    def L(delta):
        E = np.zeros_like(model.M)
        E[a, a] = delta
        M = model.M + E
        return loss(energies(model.replace(M=M, B=phys.damping_rate * M), F, n_steps=600), y, theta)[0]

    assert dM[a] == pytest.approx((L(h) - L(-h)) / (2 * h), rel=1e-6)


@given(st.integers(0, 1000), st.floats(-2, 2), st.floats(-2, 2))
def test_gradient_is_linear_in_weights(seed, w1, w2):
    model = oracle_effective_model(random_geometry(2, 2, seed=seed))
    F = np.random.default_rng(seed).normal(size=(2, 201))
    dyn = LinearDynamics(model)
    store = forward_pass(dyn, F, 200)
    ga = adjoint_backward(model, F, store, [w1, 0.0])
    gb = adjoint_backward(model, F, store, [0.0, w2])
    gab = adjoint_backward(model, F, store, [w1, w2])
    scale = max(np.abs(gab.dK).max(), 1e-300)
    assert np.abs(ga.dK + gb.dK - gab.dK).max() <= 1e-10 * scale


# ---------------------------------------------------------------- checkpointing


def test_checkpointed_equals_dense_long_run():
    M = np.diag([1.0, 1.3])
    K = np.array([[2.0, -0.4], [-0.4, 1.5]])
    model = EffectiveModel(M, K, 0.01 * M, np.array([1.0, 0.0]), 1)
    n = 10_000
    F = np.sin(0.9 * np.arange(n + 1) * 0.01)[None]
    rel, peak = checkpointed_equals_dense(model, F, n, dt=0.01)
    assert rel < 1e-12
    assert peak <= 2 * math.ceil(math.sqrt(n)) + 2


def test_checkpointing_single_step():
    model = oscillator(1.0, b=0.1)
    rel, peak = checkpointed_equals_dense(model, np.ones((1, 2)), 1, dt=0.1)
    assert rel == 0.0
    assert default_interval(1) == 1


def test_checkpoint_mismatch_is_contract_error():
    model = oracle_effective_model(random_geometry(2, 2, seed=0))
    F = np.ones((1, 101))
    store = forward_pass(LinearDynamics(model), F, 100)
    store.saved_states.pop()
    with pytest.raises(ContractError):
        adjoint_backward(model, F, store, [1.0])


# ---------------------------------------------------------------- loss


def test_loss_at_threshold_is_log2():
    L, _, _ = loss(np.array([math.e**2.0]), np.array([1]), 2.0)
    assert L == pytest.approx(math.log(2), rel=1e-15)


def test_loss_saturates():
    L, _, _ = loss(np.array([math.e**200]), np.array([1]), 0.0)
    assert L < 1e-80


def _d5(f, x, h):
    # five-point stencil, truncation O(h^4)
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def test_loss_theta_gradient_tight():
    E = np.exp(np.array([0.3, -1.2, 2.0, 0.9]))
    y = np.array([1, -1, 1, -1])
    _, _, dth = loss(E, y, 0.4, scale=1.5)
    assert dth == pytest.approx(_d5(lambda t: loss(E, y, t, scale=1.5)[0], 0.4, 1e-3), rel=1e-9)


@given(st.lists(st.tuples(st.floats(-30, 30), st.sampled_from([-1, 1])), min_size=1, max_size=10), st.floats(-10, 10))
def test_loss_gradients_vs_finite_differences(samples, theta):
    logE = np.array([s[0] for s in samples])
    y = np.array([s[1] for s in samples])
    L, dE, dth = loss(np.exp(logE), y, theta)
    assert dth == pytest.approx(_d5(lambda t: loss(np.exp(logE), y, t)[0], theta, 1e-3), rel=1e-6, abs=1e-12)

    def L0(u):
        q = logE.copy()
        q[0] = u
        return loss(np.exp(q), y, theta)[0]

    assert dE[0] * np.exp(logE[0]) == pytest.approx(_d5(L0, logE[0], 1e-3), rel=1e-6, abs=1e-12)


def test_loss_silent_samples():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        L, dE, _ = loss(np.array([0.0, math.e]), np.array([1, 1]), 1.0)
    assert any("silent" in str(x.message) for x in w)
    assert dE[0] == 0.0 and L == pytest.approx(math.log(2))
    with pytest.raises(DomainError):
        loss(np.zeros(3), np.ones(3), 0.0)
