"""Explicit RK4 time integration of lattice dynamics, energy readout and frequency response.

Batches of forcing signals are integrated together: state arrays have shape
``(dim, S)`` with one column per sample, so every right-hand-side evaluation
is a handful of small matrix products.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowupError, ContractError, SingularityError
from .model import EffectiveModel, State

DEFAULT_DT = 624.7e-9


@dataclass(frozen=True)
class SimConfig:
    dt: float = DEFAULT_DT
    n_steps: int = 1000
    store_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractError("dt must be positive")
        if self.n_steps < 1:
            raise ContractError("n_steps must be at least 1")
        if self.store_stride < 1:
            raise ContractError("store_stride must be at least 1")


@dataclass
class Trajectory:
    times: np.ndarray
    states: list[State]
    energy_out: float
    x_out: np.ndarray = field(repr=False)

    def to_csv(self) -> str:
        lines = ["t,x_out"]
        lines += [f"{t!r},{x!r}" for t, x in zip(self.times.tolist(), self.x_out.tolist())]
        return "\n".join(lines) + "\n"


def rk4_step(state: State, t: float, dt: float, field) -> State:
    """One classical fourth-order Runge-Kutta step of ``dr/dt = field(r, t)``."""
    r = state.as_vector()
    k1 = field(r, t)
    k2 = field(r + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(r + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(r + dt * k3, t + dt)
    r = r + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(r)):
        raise BlowupError("non-finite state after RK4 step", step=0)
    return State.from_vector(r, t + dt)


def linear_field(model: EffectiveModel, forcing=None):
    """First-order field ``(x, v) -> (v, M^-1 (w_in s(t) - K x - B v))`` for :func:`rk4_step`."""
    n = model.n
    Kt, Bt, wt = model.M_inv @ model.K, model.M_inv @ model.B, model.M_inv @ model.w_in

    def f(r, t):
        x, v = r[:n], r[n:]
        acc = -Kt @ x - Bt @ v
        if forcing is not None:
            acc = acc + wt * forcing(t)
        return np.concatenate([v, acc])

    return f


class LinearDynamics:
    """Batched first-order form of a linear effective model.

    Implements the interface shared with the nonlinear composite network:
    ``rhs``, ``vjp`` (transposed Jacobian product) and ``accumulate``
    (parameter gradients from stacked stage data).
    """

    def __init__(self, model: EffectiveModel):
        self.model = model
        self.n = n = model.n
        self.dim = 2 * n
        self.out = model.i_out
        self.Minv = model.M_inv
        self.K, self.B = model.K, model.B
        self.Kt = self.Minv @ model.K
        self.Bt = self.Minv @ model.B
        self.wt = self.Minv @ model.w_in

    def rhs(self, r, s):
        n = self.n
        out = np.empty_like(r)
        out[:n] = r[n:]
        acc = out[n:]
        np.matmul(self.Kt, r[:n], out=acc)
        acc += self.Bt @ r[n:]
        np.negative(acc, out=acc)
        acc += np.multiply.outer(self.wt, s)
        return out

    def vjp(self, r, lam):
        """Return ``J^T lam`` and ``z = M^-1 lam_v`` (reused by ``accumulate``)."""
        n = self.n
        z = self.Minv @ lam[n:]
        out = np.empty_like(lam)
        np.matmul(self.K, z, out=out[:n])
        np.negative(out[:n], out=out[:n])
        out[n:] = lam[:n] - self.B @ z
        return out, z

    def propagator(self, h):
        """Exact RK4 step as a linear map: ``r' = P r + a F_k + b F_{k+1}``.

        Built by pushing identity columns and unit forcings through the
        stage recursion, so it is the classical RK4 update, not an
        approximation of it.
        """
        d = self.dim
        z = np.zeros(d)
        P = _rk4_linear(self, np.eye(d), z, z, z, h)
        e = np.eye(3)
        Q = _rk4_linear(self, np.zeros((d, 3)), e[0], e[1], e[2], h)
        # midpoint forcing is the average of the two grid samples
        return P, Q[:, 0] + 0.5 * Q[:, 1], 0.5 * Q[:, 1] + Q[:, 2]

    def new_grads(self):
        n = self.n
        return {"GK": np.zeros((n, n)), "GB": np.zeros((n, n)), "dM": np.zeros(n)}

    def accumulate(self, grads, Y, Kst, Z):
        """Add ``lam_bar . df/dp`` for column-stacked stage data.

        ``Y``, ``Kst``: stage inputs and field values, shape ``(dim, T)``;
        ``Z``: M^-1 times the velocity part of the stage adjoints, ``(n, T)``.
        """
        n = self.n
        grads["GK"] -= Z @ Y[:n].T
        grads["GB"] -= Z @ Y[n:].T
        grads["dM"] -= np.einsum("ij,ij->i", Z, Kst[n:])


@dataclass
class StageBuffer:
    """Dense storage of one checkpoint interval, including RK4 stage data."""

    Y: np.ndarray
    Kst: np.ndarray
    R: np.ndarray


def _stage_forcings(F, k):
    s0 = F[:, k]
    s1 = F[:, k + 1]
    return s0, 0.5 * (s0 + s1), s1


def rk4_batch_step(dyn, r, F, k, h, buf: StageBuffer | None = None, j=0):
    """Advance a batch of states one step; optionally record stage data at slot ``j``."""
    s0, sm, s1 = _stage_forcings(F, k)
    k1 = dyn.rhs(r, s0)
    y2 = r + (0.5 * h) * k1
    k2 = dyn.rhs(y2, sm)
    y3 = r + (0.5 * h) * k2
    k3 = dyn.rhs(y3, sm)
    y4 = r + h * k3
    k4 = dyn.rhs(y4, s1)
    if buf is not None:
        buf.R[j] = r
        Y, Ks = buf.Y, buf.Kst
        Y[4 * j], Y[4 * j + 1], Y[4 * j + 2], Y[4 * j + 3] = r, y2, y3, y4
        Ks[4 * j], Ks[4 * j + 1], Ks[4 * j + 2], Ks[4 * j + 3] = k1, k2, k3, k4
    return r + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _rk4_linear(dyn, r, s0, sm, s1, h):
    k1 = dyn.rhs(r, s0)
    k2 = dyn.rhs(r + (0.5 * h) * k1, sm)
    k3 = dyn.rhs(r + (0.5 * h) * k2, sm)
    k4 = dyn.rhs(r + h * k3, s1)
    return r + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def prepare_forcing(forcing, n_steps) -> np.ndarray:
    """Return forcing as ``(S, n_steps + 1)``; samples beyond the given length are 0."""
    F = np.atleast_2d(np.asarray(forcing, dtype=float))
    if F.shape[1] < n_steps:
        raise ContractError(f"forcing has {F.shape[1]} samples, need at least {n_steps}")
    out = np.zeros((F.shape[0], n_steps + 1))
    m = min(F.shape[1], n_steps + 1)
    out[:, :m] = F[:, :m]
    return out


def simulate_batch(dyn, forcing, dt, n_steps, r0=None, interval=None, store_stride=None):
    """Integrate a batch of forcings.

    Returns ``(energy, checkpoints, snapshots)``. ``energy[s] = dt * sum_k y_out(t_k)^2``
    over steps k = 1..n_steps. ``checkpoints`` holds the states at every
    ``interval``-th step (or is empty if ``interval`` is None); ``snapshots``
    holds every ``store_stride``-th state if requested.
    """
    F = prepare_forcing(forcing, n_steps)
    S = F.shape[0]
    r = np.zeros((dyn.dim, S)) if r0 is None else np.array(np.broadcast_to(np.reshape(r0, (dyn.dim, -1)), (dyn.dim, S)))
    checkpoints = [r.copy()] if interval else []
    snaps = [r.copy()] if store_stride else []
    out = dyn.out
    if hasattr(dyn, "propagator"):
        return _simulate_linear(dyn, F, dt, n_steps, r, interval, store_stride, checkpoints, snaps)
    acc = np.zeros(S)
    for k in range(n_steps):
        r = rk4_batch_step(dyn, r, F, k, dt)
        if not np.isfinite(r[out]).all():
            raise BlowupError("non-finite state during forward integration", step=k + 1)
        acc += r[out] ** 2
        if interval and (k + 1) % interval == 0:
            checkpoints.append(r.copy())
        if store_stride and (k + 1) % store_stride == 0:
            snaps.append(r.copy())
    if not np.isfinite(r).all():
        raise BlowupError("non-finite state during forward integration", step=n_steps)
    if interval and n_steps % interval:
        checkpoints.append(r.copy())
    return dt * acc, checkpoints, snaps


def linear_steps(P, a, b, F, r, k0, m, R=None):
    """Advance ``m`` propagator steps from step ``k0``; optionally store start states in ``R[:, j]``.

    Returns the final state and the readout-independent history ``X`` of
    post-step states, shape ``(m, dim, S)``.
    """
    U = np.multiply.outer(a, F[:, k0 : k0 + m].T) + np.multiply.outer(b, F[:, k0 + 1 : k0 + m + 1].T)
    X = np.empty((m,) + r.shape)
    for j in range(m):
        if R is not None:
            R[:, j] = r
        r = P @ r
        r += U[:, j]
        X[j] = r
    return r, X


def _simulate_linear(dyn, F, dt, n_steps, r, interval, store_stride, checkpoints, snaps):
    P, a, b = dyn.propagator(dt)
    out = dyn.out
    block = interval or min(n_steps, 4096)
    acc = np.zeros(r.shape[1])
    k0 = 0
    while k0 < n_steps:
        m = min(block, n_steps - k0)
        r, X = linear_steps(P, a, b, F, r, k0, m)
        xo = X[:, out]
        bad = ~np.isfinite(xo).all(axis=1)
        if bad.any():
            raise BlowupError("non-finite state during forward integration", step=k0 + 1 + int(np.argmax(bad)))
        acc += np.einsum("ks,ks->s", xo, xo)
        if store_stride:
            for j in range(m):
                if (k0 + j + 1) % store_stride == 0:
                    snaps.append(X[j].copy())
        k0 += m
        if interval:
            checkpoints.append(r.copy())
    if not np.isfinite(r).all():
        raise BlowupError("non-finite state during forward integration", step=n_steps)
    return dt * acc, checkpoints, snaps


def simulate(model: EffectiveModel, forcing, cfg: SimConfig, x0=None, v0=None) -> Trajectory:
    """Integrate one forcing signal and return the strided trajectory and output energy."""
    dyn = LinearDynamics(model)
    r0 = None
    if x0 is not None or v0 is not None:
        x0 = np.zeros(model.n) if x0 is None else np.ravel(x0)
        v0 = np.zeros(model.n) if v0 is None else np.ravel(v0)
        r0 = np.concatenate([x0, v0])
    energy, _, snaps = simulate_batch(dyn, np.reshape(forcing, (1, -1)), cfg.dt, cfg.n_steps, r0=r0, store_stride=cfg.store_stride)
    n = model.n
    times = cfg.dt * cfg.store_stride * np.arange(len(snaps))
    states = [State(s[:n, 0], s[n:, 0], t) for s, t in zip(snaps, times)]
    x_out = np.array([s[model.i_out, 0] for s in snaps])
    return Trajectory(times=times, states=states, energy_out=float(energy[0]), x_out=x_out)


def energies(model: EffectiveModel, forcings, dt=DEFAULT_DT, n_steps=None) -> np.ndarray:
    """Transmitted energy for every row of ``forcings``."""
    forcings = np.atleast_2d(forcings)
    n_steps = forcings.shape[1] if n_steps is None else n_steps
    return simulate_batch(LinearDynamics(model), forcings, dt, n_steps)[0]


def mechanical_energy(model: EffectiveModel, state: State) -> float:
    return 0.5 * state.v @ model.M @ state.v + 0.5 * state.x @ model.K @ state.x


def transfer_function(model: EffectiveModel, omegas) -> np.ndarray:
    """``H(w) = e_out^T (K - w^2 M + i w B)^-1 w_in`` for each angular frequency."""
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    if np.any(omegas <= 0):
        raise ContractError("angular frequencies must be positive")
    H = np.empty(omegas.size, dtype=complex)
    scale = np.abs(model.K).max() + 1e-300
    for j, w in enumerate(omegas):
        D = model.K - w * w * model.M + 1j * w * model.B
        if np.linalg.cond(D) * np.finfo(float).eps > 1.0 or not np.isfinite(np.linalg.cond(D)):
            raise SingularityError(f"dynamic stiffness singular at omega={w!r} (scale {scale:.3g})")
        H[j] = np.linalg.solve(D, model.w_in.astype(complex))[model.i_out]
    return H


def classify_energy(E, theta, polarity=1):
    """``+1`` where ``polarity * (log E - theta) > 0``, else ``-1``; ``E <= 0`` maps to ``-1``."""
    E = np.asarray(E, dtype=float)
    with np.errstate(divide="ignore"):
        logE = np.where(E > 0, np.log(np.where(E > 0, E, 1.0)), -np.inf)
    z = polarity * (logE - theta)
    lab = np.where(z > 0, 1, -1)
    lab = np.where(E > 0, lab, -1)
    return lab if lab.ndim else int(lab)


def decay_time(model: EffectiveModel) -> float:
    """Slowest amplitude decay time ``2 / max(eig(M^-1 B))`` bound, for window sizing."""
    rates = np.linalg.eigvals(model.M_inv @ model.B).real
    rmin = rates[rates > 0].min() if np.any(rates > 0) else 0.0
    return math.inf if rmin == 0 else 2.0 / rmin
