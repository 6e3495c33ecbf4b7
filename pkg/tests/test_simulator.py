import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import eigh

from phononet.errors import BlowupError, ContractError, SingularityError
from phononet.model import EffectiveModel, PhysicsConfig, State, oracle_effective_model, random_geometry
from phononet.simulator import (
    DEFAULT_DT,
    LinearDynamics,
    SimConfig,
    classify_energy,
    decay_time,
    energies,
    linear_field,
    mechanical_energy,
    rk4_batch_step,
    rk4_step,
    simulate,
    simulate_batch,
    transfer_function,
)


def oscillator(k=1.0, m=1.0, b=0.0):
    return EffectiveModel(np.array([[m]]), np.array([[k]]), np.array([[b]]), np.ones(1), 0)


def integrate(model, T, n, x0=1.0):
    f = linear_field(model)
    s = State(np.array([x0]), np.zeros(1))
    dt = T / n
    for k in range(n):
        s = rk4_step(s, k * dt, dt, f)
    return s


# ---------------------------------------------------------------- rk4


def test_harmonic_oscillator_full_period():
    s = integrate(oscillator(), 2 * math.pi, 1000)
    assert s.x[0] == pytest.approx(1.0, abs=1e-10)
    assert s.t == pytest.approx(2 * math.pi)


def test_zero_stays_zero():
    m = oracle_effective_model(random_geometry(3, 3, seed=0))
    E, _, snaps = simulate_batch(LinearDynamics(m), np.zeros((1, 201)), DEFAULT_DT, 200, store_stride=50)
    assert E[0] == 0.0
    assert all(not s.any() for s in snaps)


def test_fourth_order_convergence():
    T = 1.5
    errs = [abs(integrate(oscillator(), T, n).x[0] - math.cos(T)) for n in (20, 40)]
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.05)


def test_blowup_raises_with_step():
    f = lambda r, t: np.array([np.inf, 0.0])
    with pytest.raises(BlowupError):
        rk4_step(State(np.zeros(1), np.zeros(1)), 0.0, 0.1, f)


def test_propagator_matches_generic_rk4_stages():
    m = oracle_effective_model(random_geometry(2, 3, seed=2))
    dyn = LinearDynamics(m)
    rng = np.random.default_rng(0)
    F = rng.normal(size=(3, 51))
    # simulate_batch takes the propagator path; rk4_batch_step evaluates the four stages
    E_fast = simulate_batch(dyn, F, DEFAULT_DT, 50)[0]
    r = np.zeros((dyn.dim, 3))
    acc = np.zeros(3)
    for k in range(50):
        r = rk4_batch_step(dyn, r, F, k, DEFAULT_DT)
        acc += r[dyn.out] ** 2
    E_generic = DEFAULT_DT * acc
    np.testing.assert_allclose(E_fast, E_generic, rtol=1e-11)


# ---------------------------------------------------------------- simulate


def _free_7x7():
    m = oracle_effective_model(random_geometry(7, 7, seed=5))
    m = m.replace(B=np.zeros_like(m.B))
    v0 = np.zeros(m.n)
    v0[m.i_out] = 1.0
    return m, v0


def _energy_drift(m, v0, dt, n):
    tr = simulate(m, np.zeros(n + 1), SimConfig(dt=dt, n_steps=n, store_stride=n), v0=v0)
    e = [mechanical_energy(m, s) for s in tr.states]
    return e[1] / e[0] - 1


def test_rk4_energy_drift_matches_amplification_factor():
    # classical RK4 on an undamped mode scales its energy by |R(iz)|^2 per step, z = omega dt
    m, v0 = _free_7x7()
    lam, V = eigh(m.K, m.M)
    n = 10_000
    z = np.sqrt(lam) * DEFAULT_DT
    gain = ((1 - z**2 / 2 + z**4 / 24) ** 2 + (z - z**3 / 6) ** 2) ** n
    em = (V.T @ m.M @ v0) ** 2
    predicted = (em * gain).sum() / em.sum() - 1
    assert _energy_drift(m, v0, DEFAULT_DT, n) == pytest.approx(predicted, rel=1e-9)


def test_undamped_energy_conservation_7x7_fine_step():
    m, v0 = _free_7x7()
    assert abs(_energy_drift(m, v0, DEFAULT_DT / 10, 10_000)) < 1e-6


def test_amplitude_scaling_is_quadratic():
    m = oracle_effective_model(random_geometry(3, 3, seed=1))
    t = np.arange(2001) * DEFAULT_DT
    f = np.sin(2 * np.pi * 68e3 * t)
    E1, E2 = energies(m, np.vstack([f, 2 * f]))
    assert E2 / E1 == pytest.approx(4.0, rel=1e-9)


def test_resonant_drive_of_symmetric_dimer():
    k, c, Q = 1.0, 0.1, 200.0
    M = np.eye(2)
    K = np.array([[k + c, -c], [-c, k + c]])
    w1 = math.sqrt(k)
    m = EffectiveModel(M, K, (w1 / Q) * M, np.array([1.0, 0.0]), 1)
    dt = 2 * math.pi / w1 / 50
    n = int(12 * Q / w1 / dt)
    t = np.arange(n + 1) * dt
    E_on, E_off = energies(m, np.vstack([np.sin(w1 * t), np.sin(0.7 * w1 * t)]), dt=dt)
    assert E_on / E_off >= Q / 10


def test_simulate_matches_energies():
    m = oracle_effective_model(random_geometry(3, 3, seed=9))
    f = np.random.default_rng(1).normal(size=501)
    tr = simulate(m, f, SimConfig(n_steps=500))
    assert tr.energy_out == pytest.approx(energies(m, f)[0], rel=1e-13)
    assert tr.x_out.size == 501
    assert tr.to_csv().startswith("t,x_out\n")


def test_forcing_too_short():
    m = oracle_effective_model(random_geometry(2, 2, seed=0))
    with pytest.raises(ContractError):
        energies(m, np.zeros(10), n_steps=100)


def test_simconfig_validation():
    with pytest.raises(ContractError):
        SimConfig(dt=0.0)
    with pytest.raises(ContractError):
        SimConfig(n_steps=0)


# ---------------------------------------------------------------- transfer function


def test_oscillator_transfer_peak():
    k, m, b = 4.0, 1.0, 0.01
    w = np.linspace(1.9, 2.1, 20001)
    H = np.abs(transfer_function(oscillator(k, m, b), w))
    w0 = w[np.argmax(H)]
    assert w0 == pytest.approx(math.sqrt(k / m), rel=1e-4)
    assert H.max() == pytest.approx(1 / (b * w0), rel=1e-4)


def test_transfer_high_frequency_limit():
    m = oracle_effective_model(random_geometry(2, 2, seed=0))
    H = np.abs(transfer_function(m, [1e7, 1e9]))
    assert H[1] < H[0] * 1e-3


def test_undamped_resonance_is_singular():
    with pytest.raises(SingularityError):
        transfer_function(oscillator(4.0, 1.0, 0.0), [2.0])


def test_steady_state_matches_transfer_function():
    model = oracle_effective_model(random_geometry(2, 2, seed=4), PhysicsConfig(Q=100))
    w = 2 * math.pi * 67e3
    tau = decay_time(model)
    n = int(25 * tau / DEFAULT_DT)
    cfg = SimConfig(n_steps=n)
    t = np.arange(n + 1) * DEFAULT_DT
    tr = simulate(model, np.sin(w * t), cfg)
    period = int(round(2 * math.pi / w / DEFAULT_DT))
    amp = np.abs(tr.x_out[-5 * period :]).max()
    assert amp == pytest.approx(abs(transfer_function(model, [w])[0]), rel=0.02)


# ---------------------------------------------------------------- classification


def test_classify_tie_breaks_negative():
    assert classify_energy(math.e**1.5, 1.5) == -1
    assert classify_energy(2 * math.e**1.5, 1.5) == 1
    assert classify_energy(0.0, -100.0) == -1


@given(st.lists(st.floats(1e-30, 1e30), min_size=1, max_size=20), st.floats(-60, 60))
def test_polarity_flips_labels_off_threshold(E, theta):
    E = np.array(E)
    a = classify_energy(E, theta, 1)
    b = classify_energy(E, theta, -1)
    off = np.log(E) != theta
    assert np.all(a[off] == -b[off])
