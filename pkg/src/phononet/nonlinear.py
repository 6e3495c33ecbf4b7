"""String-cantilever nonlinear element and two-layer networks built around it.

Two linear lattices are driven by the same input. Their output displacements
force two strings (feedforward), and both strings couple to a cantilever
through the potential ``gamma_1 x_c x_s1^2 + gamma_2 x_c x_s2^2``. The
readout is the energy of string 1.

Because the coupling is one-way, one RK4 step of the composite system is the
lattice RK4 step plus an element RK4 step whose stage forces are the lattice
*stage* outputs. The lattices therefore keep their propagator fast path, and
only the 3-DOF element is stepped nonlinearly (compiled with numba). The
generic :class:`CompositeDynamics` integrates the full state and serves as
the reference implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.special import expit, logit

from .adjoint import _pair_convention, _stage_gradients, default_interval
from .errors import BlowupError, ContractError
from .loss import loss as logistic_loss
from .model import EffectiveModel, Geometry, PhysicsConfig, oracle_effective_model, oracle_jacobian, random_geometry, structural_mask
from .simulator import DEFAULT_DT, LinearDynamics, linear_steps, prepare_forcing

S1, S2, C = 0, 1, 2


@dataclass(frozen=True)
class NonlinearElement:
    """Masses, dampings and stiffnesses of (s1, s2, c) plus the two cross-Kerr constants."""

    m: tuple = (1.0, 1.0, 1.0)
    b: tuple = (0.0, 0.0, 0.0)
    k: tuple = (1.0, 1.0, 1.0)
    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        m, b, k = (np.asarray(v, float) for v in (self.m, self.b, self.k))
        if m.shape != (3,) or b.shape != (3,) or k.shape != (3,):
            raise ContractError("element needs three masses, dampings and stiffnesses")
        if (m <= 0).any() or (b < 0).any() or (k <= 0).any():
            raise ContractError("element masses and stiffnesses must be > 0, dampings >= 0")
        object.__setattr__(self, "m", tuple(map(float, m)))
        object.__setattr__(self, "b", tuple(map(float, b)))
        object.__setattr__(self, "k", tuple(map(float, k)))

    @classmethod
    def from_frequencies(cls, f_s1, f_s2, f_c, Q_s=1000.0, Q_c=2.0, gamma1=0.0, gamma2=0.0, mass=1.0):
        w = 2 * np.pi * np.array([f_s1, f_s2, f_c])
        Q = np.array([Q_s, Q_s, Q_c])
        return cls((mass,) * 3, tuple(mass * w / Q), tuple(mass * w**2), gamma1, gamma2)

    def frequencies(self):
        return np.sqrt(np.array(self.k) / np.array(self.m)) / (2 * np.pi)

    def params(self):
        return np.array([*self.m, *self.b, *self.k, self.gamma1, self.gamma2])

    def potential(self, x):
        """Conservative energy of displacements ``x = (x_s1, x_s2, x_c)``."""
        k = np.array(self.k)
        return 0.5 * (k @ (x * x)) + self.gamma1 * x[C] * x[S1] ** 2 + self.gamma2 * x[C] * x[S2] ** 2

    def to_dict(self):
        return {"m": list(self.m), "b": list(self.b), "k": list(self.k), "gamma1": self.gamma1, "gamma2": self.gamma2}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["m"]), tuple(d["b"]), tuple(d["k"]), float(d["gamma1"]), float(d["gamma2"]))


def element_field(el: NonlinearElement, x, v, f):
    """Accelerations of (s1, s2, c) for displacements ``x``, velocities ``v`` and forces ``f``.

    The couplings derive from the potential ``gamma_1 x_c x_s1^2 + gamma_2 x_c x_s2^2``:
    the cantilever shifts the string stiffnesses by ``2 gamma x_c`` and feels
    a force ``-gamma x_s^2`` from each string's stretching.

    All arguments have a leading axis of length 3; trailing batch axes broadcast.
    """
    m, b, k = (np.asarray(a).reshape((3,) + (1,) * (np.ndim(x) - 1)) for a in (el.m, el.b, el.k))
    g1, g2 = el.gamma1, el.gamma2
    a = np.empty(np.broadcast(x, v, f).shape)
    a[S1] = (f[S1] - b[S1] * v[S1] - (k[S1] + 2 * g1 * x[C]) * x[S1]) / m[S1]
    a[S2] = (f[S2] - b[S2] * v[S2] - (k[S2] + 2 * g2 * x[C]) * x[S2]) / m[S2]
    a[C] = (f[C] - b[C] * v[C] - k[C] * x[C] - g1 * x[S1] ** 2 - g2 * x[S2] ** 2) / m[C]
    return a


# ---------------------------------------------------------------- network


@dataclass
class DeepNetwork:
    lattice_a: EffectiveModel
    lattice_b: EffectiveModel
    element: NonlinearElement
    kappa_a: float = 1.0
    kappa_b: float = 1.0
    geometry_a: Geometry | None = None
    geometry_b: Geometry | None = None

    @property
    def state_dim(self):
        return 2 * (self.lattice_a.n + self.lattice_b.n + 3)

    def to_dict(self):
        return {
            "layers": {
                "lattice_a": {"model": self.lattice_a.to_dict(), "geometry": None if self.geometry_a is None else self.geometry_a.to_dict()},
                "lattice_b": {"model": self.lattice_b.to_dict(), "geometry": None if self.geometry_b is None else self.geometry_b.to_dict()},
                "element": self.element.to_dict(),
                "kappa": [self.kappa_a, self.kappa_b],
            }
        }

    @classmethod
    def from_dict(cls, d):
        L = d["layers"]
        ga, gb = L["lattice_a"]["geometry"], L["lattice_b"]["geometry"]
        return cls(
            EffectiveModel.from_dict(L["lattice_a"]["model"]),
            EffectiveModel.from_dict(L["lattice_b"]["model"]),
            NonlinearElement.from_dict(L["element"]),
            float(L["kappa"][0]),
            float(L["kappa"][1]),
            None if ga is None else Geometry.from_dict(ga),
            None if gb is None else Geometry.from_dict(gb),
        )


class CompositeDynamics:
    """Full first-order state ``[x_a, x_b, x_el, v_a, v_b, v_el]`` for the generic RK4 engine."""

    def __init__(self, net: DeepNetwork):
        self.net = net
        self.la, self.lb = LinearDynamics(net.lattice_a), LinearDynamics(net.lattice_b)
        na, nb = self.la.n, self.lb.n
        self.na, self.nb = na, nb
        self.n = na + nb + 3
        self.dim = 2 * self.n
        self.e0 = na + nb
        self.out = self.e0 + S1
        self.aux_dim = 0
        self.el = net.element

    def _split(self, r):
        n, na, e0 = self.n, self.na, self.e0
        return (r[:na], r[na:e0], r[e0:n], r[n : n + na], r[n + na : n + e0], r[n + e0 :])

    def rhs(self, r, s):
        xa, xb, xe, va, vb, ve = self._split(r)
        out = np.empty_like(r)
        n, na, e0 = self.n, self.na, self.e0
        out[:n] = r[n:]
        out[n : n + na] = self.la.rhs(np.concatenate([xa, va]), s)[na:]
        out[n + na : n + e0] = self.lb.rhs(np.concatenate([xb, vb]), s)[self.nb :]
        f = np.zeros_like(xe)
        f[S1] = self.net.kappa_a * xa[self.la.out]
        f[S2] = self.net.kappa_b * xb[self.lb.out]
        out[n + e0 :] = element_field(self.el, xe, ve, f)
        return out

    def vjp(self, r, lam):
        """Transposed Jacobian product; parameter gradients are not tracked on this reference path."""
        xa, xb, xe, va, vb, ve = self._split(r)
        n, na, nb, e0 = self.n, self.na, self.nb, self.e0
        el = self.el
        m, b, k = np.array(el.m), np.array(el.b), np.array(el.k)
        g1, g2 = el.gamma1, el.gamma2
        lx, lv = lam[:n], lam[n:]
        out = np.empty_like(lam)
        ja, _ = self.la.vjp(np.concatenate([xa, va]), np.concatenate([lx[:na], lv[:na]]))
        jb, _ = self.lb.vjp(np.concatenate([xb, vb]), np.concatenate([lx[na:e0], lv[na:e0]]))
        out[:na], out[n : n + na] = ja[:na], ja[na:]
        out[na:e0], out[n + na : n + e0] = jb[:nb], jb[nb:]
        a1, a2, ac = lv[e0 + S1] / m[S1], lv[e0 + S2] / m[S2], lv[e0 + C] / m[C]
        x1, x2, xc = xe
        out[e0 + S1] = -a1 * (k[S1] + 2 * g1 * xc) - ac * 2 * g1 * x1
        out[e0 + S2] = -a2 * (k[S2] + 2 * g2 * xc) - ac * 2 * g2 * x2
        out[e0 + C] = -a1 * 2 * g1 * x1 - a2 * 2 * g2 * x2 - ac * k[C]
        out[n + e0 + S1] = lx[e0 + S1] - a1 * b[S1]
        out[n + e0 + S2] = lx[e0 + S2] - a2 * b[S2]
        out[n + e0 + C] = lx[e0 + C] - ac * b[C]
        # feedforward drive of the strings by the lattice outputs
        out[self.la.out] += self.net.kappa_a * a1
        out[na + self.lb.out] += self.net.kappa_b * a2
        return out, np.zeros((0,) + lam.shape[1:])

    def new_grads(self):
        return {}

    def accumulate(self, grads, Y, Kst, Z):
        pass


# ---------------------------------------------------------------- element kernels


@numba.njit(cache=True)
def _el_rhs(x1, x2, xc, v1, v2, vc, u1, u2, p):
    m1, m2, mc, b1, b2, bc, k1, k2, kc, g1, g2 = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10]
    a1 = (u1 - b1 * v1 - (k1 + 2.0 * g1 * xc) * x1) / m1
    a2 = (u2 - b2 * v2 - (k2 + 2.0 * g2 * xc) * x2) / m2
    ac = (-bc * vc - kc * xc - g1 * x1 * x1 - g2 * x2 * x2) / mc
    return v1, v2, vc, a1, a2, ac


@numba.njit(cache=True)
def _el_step(y, U1, U2, h, p, stages, kvals):
    """One RK4 step; ``U1``/``U2`` hold the four stage forces. Stage inputs/fields go to ``stages``/``kvals``."""
    for i in range(6):
        stages[0, i] = y[i]
    for st in range(4):
        s = stages[st]
        d = _el_rhs(s[0], s[1], s[2], s[3], s[4], s[5], U1[st], U2[st], p)
        for i in range(6):
            kvals[st, i] = d[i]
        if st < 3:
            c = 0.5 * h if st < 2 else h
            for i in range(6):
                stages[st + 1, i] = y[i] + c * d[i]
    out = np.empty(6)
    for i in range(6):
        out[i] = y[i] + (h / 6.0) * (kvals[0, i] + 2.0 * (kvals[1, i] + kvals[2, i]) + kvals[3, i])
    return out


@numba.njit(cache=True)
def _el_forward(Z1, Z2, h, p):
    """Integrate the element for every sample. ``Z1``, ``Z2``: ``(S, N, 4)`` stage forces.

    Returns states ``(S, N+1, 6)``, energies ``(S,)`` and the first step at
    which a sample went non-finite (``-1`` if none).
    """
    S, N = Z1.shape[0], Z1.shape[1]
    X = np.zeros((S, N + 1, 6))
    E = np.zeros(S)
    bad = -1
    stages = np.empty((4, 6))
    kvals = np.empty((4, 6))
    for s in range(S):
        y = np.zeros(6)
        acc = 0.0
        for k in range(N):
            y = _el_step(y, Z1[s, k], Z2[s, k], h, p, stages, kvals)
            X[s, k + 1] = y
            acc += y[0] * y[0]
            if not np.isfinite(y[0] + y[1] + y[2] + y[3] + y[4] + y[5]):
                if bad < 0 or k + 1 < bad:
                    bad = k + 1
                break
        E[s] = h * acc
    return X, E, bad


@numba.njit(cache=True)
def _el_vjp(s, kb, p):
    """``J^T kb`` for the element field at stage input ``s``; also returns force adjoints and stiffness grads."""
    m1, m2, mc, b1, b2, bc, k1, k2, kc, g1, g2 = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10]
    x1, x2, xc = s[0], s[1], s[2]
    a1, a2, ac = kb[3] / m1, kb[4] / m2, kb[5] / mc
    out = np.empty(6)
    out[0] = -a1 * (k1 + 2.0 * g1 * xc) - ac * 2.0 * g1 * x1
    out[1] = -a2 * (k2 + 2.0 * g2 * xc) - ac * 2.0 * g2 * x2
    out[2] = -a1 * 2.0 * g1 * x1 - a2 * 2.0 * g2 * x2 - ac * kc
    out[3] = kb[0] - a1 * b1
    out[4] = kb[1] - a2 * b2
    out[5] = kb[2] - ac * bc
    return out, a1, a2, -a1 * x1, -a2 * x2, -ac * xc


@numba.njit(cache=True)
def _el_backward(X, Z1, Z2, h, p, w):
    """Reverse sweep for ``sum_s w_s E_s``.

    Returns stage-force adjoints ``(S, N, 4)`` for both strings and the
    stiffness gradients ``(3,)``.
    """
    S, N = Z1.shape[0], Z1.shape[1]
    G1 = np.zeros((S, N, 4))
    G2 = np.zeros((S, N, 4))
    gk = np.zeros(3)
    stages = np.empty((4, 6))
    kvals = np.empty((4, 6))
    ybar = np.empty((4, 6))
    coef = np.array([1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0])
    for s in range(S):
        lam = np.zeros(6)
        src = 2.0 * h * w[s]
        for k in range(N - 1, -1, -1):
            lam[0] += src * X[s, k + 1, 0]
            _el_step(X[s, k], Z1[s, k], Z2[s, k], h, p, stages, kvals)
            for st in range(3, -1, -1):
                kb = np.empty(6)
                for i in range(6):
                    kb[i] = coef[st] * h * lam[i]
                if st == 2:
                    for i in range(6):
                        kb[i] += h * ybar[3, i]
                elif st < 2:
                    for i in range(6):
                        kb[i] += 0.5 * h * ybar[st + 1, i]
                yb, u1, u2, d1, d2, dc = _el_vjp(stages[st], kb, p)
                for i in range(6):
                    ybar[st, i] = yb[i]
                G1[s, k, st] = u1
                G2[s, k, st] = u2
                gk[0] += d1
                gk[1] += d2
                gk[2] += dc
            for i in range(6):
                lam[i] += ybar[0, i] + ybar[1, i] + ybar[2, i] + ybar[3, i]
    return G1, G2, gk


# ---------------------------------------------------------------- lattice stage outputs


def stage_maps(dyn: LinearDynamics, h):
    """Rows ``(Cst, Dst)`` giving the output coordinate of the four RK4 stage inputs.

    ``y_i[out] = Cst[i] @ r + Dst[i] @ (s0, sm, s1)``.
    """
    d = dyn.dim
    R = np.zeros((d, d + 3))
    R[:, :d] = np.eye(d)
    e = np.zeros((3, d + 3))
    e[:, d:] = np.eye(3)
    s0, sm, s1 = e
    k1 = dyn.rhs(R, s0)
    y2 = R + 0.5 * h * k1
    y3 = R + 0.5 * h * dyn.rhs(y2, sm)
    y4 = R + h * dyn.rhs(y3, sm)
    rows = np.array([y[dyn.out] for y in (R, y2, y3, y4)])
    return rows[:, :d], rows[:, d:]


def _stage_forcings(F, k0, m):
    s0 = F[:, k0 : k0 + m]
    s1 = F[:, k0 + 1 : k0 + m + 1]
    return np.stack([s0, 0.5 * (s0 + s1), s1], axis=-1)  # (S, m, 3)


def lattice_stage_outputs(dyn: LinearDynamics, F, h, n_steps, interval):
    """Stage outputs ``(S, N, 4)`` of one lattice plus its square-root checkpoints."""
    P, a, b = dyn.propagator(h)
    Cst, Dst = stage_maps(dyn, h)
    S = F.shape[0]
    r = np.zeros((dyn.dim, S))
    Z = np.empty((S, n_steps, 4))
    cps = [r.copy()]
    R = np.empty((dyn.dim, interval, S))
    k0 = 0
    while k0 < n_steps:
        m = min(interval, n_steps - k0)
        r, _ = linear_steps(P, a, b, F, r, k0, m, R)
        Z[:, k0 : k0 + m] = np.einsum("ij,jms->smi", Cst, R[:, :m]) + _stage_forcings(F, k0, m) @ Dst.T
        cps.append(r.copy())
        k0 += m
    return Z, cps


def lattice_stage_adjoint(dyn: LinearDynamics, F, h, n_steps, interval, cps, G):
    """Parameter gradients of ``sum G . stage_outputs`` for one lattice.

    ``G`` has shape ``(S, N, 4)``. Intervals are replayed from the
    checkpoints; the gradient uses the same correlation trick as the
    single-layer adjoint, extended with the stage-output adjoints.
    """
    P, a, b = dyn.propagator(h)
    Cst, Dst = stage_maps(dyn, h)
    PT = np.ascontiguousarray(P.T)
    dim, S = dyn.dim, F.shape[0]
    R = np.empty((dim, interval, S))
    LAM = np.empty((dim, interval, S))
    Cc = np.zeros((dim + 4, dim + 3))
    lam = np.zeros((dim, S))
    n_int = len(cps) - 1
    for j in reversed(range(n_int)):
        k0 = j * interval
        m = min(n_steps, k0 + interval) - k0
        linear_steps(P, a, b, F, cps[j], k0, m, R)
        for i in reversed(range(m)):
            LAM[:, i] = lam
            lam = PT @ lam + Cst.T @ G[:, k0 + i].T
        if not np.isfinite(lam).all():
            raise BlowupError("non-finite adjoint state", step=k0)
        adj = np.concatenate([LAM[:, :m], G[:, k0 : k0 + m].transpose(2, 1, 0)], axis=0).reshape(dim + 4, m * S)
        st = np.concatenate([R[:, :m], _stage_forcings(F, k0, m).transpose(2, 1, 0)], axis=0).reshape(dim + 3, m * S)
        Cc += adj @ st.T
    grads = dyn.new_grads()
    cols = np.eye(dim + 3)[:dim]
    e = np.zeros((3, dim + 3))
    e[:, dim:] = np.eye(3)
    _stage_gradients(dyn, grads, cols, Cc[:dim], e[0], e[1], e[2], h, G=Cc[dim:])
    return grads


# ---------------------------------------------------------------- forward / gradient


@dataclass
class DeepForward:
    energy: np.ndarray
    element_states: np.ndarray
    Za: np.ndarray
    Zb: np.ndarray
    cps_a: list
    cps_b: list
    interval: int
    n_steps: int
    dt: float


def _params(net: DeepNetwork):
    return net.element.params()


def deep_forward(net: DeepNetwork, forcing, n_steps=None, dt=DEFAULT_DT, interval=None) -> DeepForward:
    """Energy of string 1 for each forcing row; keeps what the gradient needs."""
    F0 = np.atleast_2d(forcing)
    n_steps = F0.shape[1] if n_steps is None else n_steps
    F = prepare_forcing(F0, n_steps)
    interval = default_interval(n_steps) if interval is None else interval
    la, lb = LinearDynamics(net.lattice_a), LinearDynamics(net.lattice_b)
    Za, cps_a = lattice_stage_outputs(la, F, dt, n_steps, interval)
    Zb, cps_b = lattice_stage_outputs(lb, F, dt, n_steps, interval)
    X, E, bad = _el_forward(net.kappa_a * Za, net.kappa_b * Zb, dt, _params(net))
    if bad >= 0 or not np.isfinite(E).all():
        raise BlowupError("non-finite element state", step=int(max(bad, 0)))
    return DeepForward(E, X, Za, Zb, cps_a, cps_b, interval, n_steps, dt)


@dataclass
class DeepGradient:
    """Gradients of ``sum_s w_s E_s`` with respect to the network's trainable quantities."""

    dK_a: np.ndarray
    dM_a: np.ndarray
    dK_b: np.ndarray
    dM_b: np.ndarray
    dk_element: np.ndarray
    dkappa: np.ndarray
    dtheta: float = 0.0


def deep_gradient(net: DeepNetwork, forcing, fwd: DeepForward, weights) -> DeepGradient:
    """Adjoint of the composite field: element reverse sweep, then both lattices with stage-output sources."""
    F = prepare_forcing(np.atleast_2d(forcing), fwd.n_steps)
    w = np.asarray(weights, float).reshape(F.shape[0])
    h = fwd.dt
    G1, G2, gk = _el_backward(fwd.element_states, net.kappa_a * fwd.Za, net.kappa_b * fwd.Zb, h, _params(net), w)
    if not (np.isfinite(G1).all() and np.isfinite(G2).all()):
        raise BlowupError("non-finite adjoint state", step=0)
    dkappa = np.array([np.sum(G1 * fwd.Za), np.sum(G2 * fwd.Zb)])
    out = []
    for model, cps, G in ((net.lattice_a, fwd.cps_a, net.kappa_a * G1), (net.lattice_b, fwd.cps_b, net.kappa_b * G2)):
        dyn = LinearDynamics(model)
        grads = lattice_stage_adjoint(dyn, F, h, fwd.n_steps, fwd.interval, cps, G)
        mask = structural_mask(model.shape) if model.shape is not None else np.ones((model.n, model.n), bool)
        dK = _pair_convention(grads["GK"], mask)
        # damping tied to the masses: B = beta M
        beta = float(model.B[0, 0] / model.M[0, 0])
        dM = grads["dM"] + beta * np.diag(grads["GB"])
        out.append((dK, dM))
    return DeepGradient(out[0][0], out[0][1], out[1][0], out[1][1], gk, dkappa)


# ---------------------------------------------------------------- parameterization and training


@dataclass
class DeepConfig:
    """Two-layer training setup; stiffness offsets are in units of the string linewidth."""

    shape: tuple = (3, 3)
    f_s1: float = 66e3
    f_s2: float = 71e3
    f_c: float = 10e3
    Q_s: float = 100.0
    Q_c: float = 2.0
    gamma_shift: float = 3.0
    bounds: tuple = (0.0, 1.0)
    iterations: int = 60
    restarts: int = 2
    seed: int = 0
    loss_scale: float = 1.0
    dt: float = DEFAULT_DT
    n_steps: int | None = None
    step: float = 1.0


class DeepParam:
    """Map ``x = [u_a, u_b, w_k (3), log kappa (2), theta]`` to a network.

    ``k_alpha = k_alpha0 * exp(2 w / Q_alpha)`` so one unit of ``w`` moves the
    resonance by roughly one linewidth.
    """

    def __init__(self, cfg: DeepConfig, physics: PhysicsConfig, base: NonlinearElement, kappa0):
        self.cfg, self.physics, self.base = cfg, physics, base
        self.kappa0 = np.asarray(kappa0, float)
        self.P = Geometry.uniform(*cfg.shape).n_params
        self.Q = np.array([cfg.Q_s, cfg.Q_s, cfg.Q_c])
        self.size = 2 * self.P + 3 + 2 + 1

    def unpack(self, x):
        P = self.P
        lo, hi = self.cfg.bounds
        ga = Geometry.from_vector(lo + (hi - lo) * expit(x[:P]), self.cfg.shape)
        gb = Geometry.from_vector(lo + (hi - lo) * expit(x[P : 2 * P]), self.cfg.shape)
        k = np.array(self.base.k) * np.exp(2 * x[2 * P : 2 * P + 3] / self.Q)
        kappa = self.kappa0 * np.exp(x[2 * P + 3 : 2 * P + 5])
        el = replace(self.base, k=tuple(k))
        net = DeepNetwork(oracle_effective_model(ga, self.physics), oracle_effective_model(gb, self.physics), el, kappa[0], kappa[1], ga, gb)
        return net, float(x[-1])

    def pack(self, ga, gb, theta, wk=(0, 0, 0), log_kappa=(0, 0)):
        lo, hi = self.cfg.bounds

        def u(g):
            return logit(np.clip((g.to_vector() - lo) / (hi - lo), 1e-6, 1 - 1e-6))

        return np.concatenate([u(ga), u(gb), np.asarray(wk, float), np.asarray(log_kappa, float), [theta]])

    def chain(self, x, net: DeepNetwork, dg: DeepGradient, dL_dE_weights_sum=None):
        """Gradient w.r.t. ``x`` (excluding theta, filled by the caller)."""
        P = self.P
        lo, hi = self.cfg.bounds
        out = np.zeros(self.size)
        iu = None
        for sl, g, dK, dM in ((slice(0, P), net.geometry_a, dg.dK_a, dg.dM_a), (slice(P, 2 * P), net.geometry_b, dg.dK_b, dg.dM_b)):
            JK, JM = oracle_jacobian(g, self.physics)
            if iu is None:
                iu = np.triu_indices(dK.shape[0])
            s = expit(x[sl])
            out[sl] = (JK[:, iu[0], iu[1]] @ dK[iu] + JM @ dM) * (hi - lo) * s * (1 - s)
        k = np.array(net.element.k)
        out[2 * P : 2 * P + 3] = dg.dk_element * k * 2 / self.Q
        out[2 * P + 3 : 2 * P + 5] = dg.dkappa * np.array([net.kappa_a, net.kappa_b])
        return out


def calibrate(cfg: DeepConfig, physics: PhysicsConfig, F, seed_geometries):
    """Base element and coupling gains for the amplitude scale of the given forcings.

    ``kappa0`` is set so a string driven on resonance moves about as much as
    the lattice output times its quality factor would suggest for ``kappa = k_s``;
    ``gamma`` is set so the typical string amplitude detunes string 1 by
    ``gamma_shift`` linewidths through the cantilever's static deflection.
    """
    base = NonlinearElement.from_frequencies(cfg.f_s1, cfg.f_s2, cfg.f_c, cfg.Q_s, cfg.Q_c)
    k = np.array(base.k)
    kappa0 = np.array([k[S1], k[S2]])
    ga, gb = seed_geometries
    net = DeepNetwork(oracle_effective_model(ga, physics), oracle_effective_model(gb, physics), base, kappa0[0], kappa0[1], ga, gb)
    n = cfg.n_steps or F.shape[1]
    fw = deep_forward(net, F, n, cfg.dt)
    x2 = np.sqrt(np.mean(fw.element_states[:, :, S2] ** 2) + np.mean(fw.element_states[:, :, S1] ** 2))
    # relative stiffness shift of string 1 from the static cantilever deflection: 2 g^2 x^2 / (k_c k_s)
    rel = cfg.gamma_shift / cfg.Q_s
    gamma = math.sqrt(rel * k[C] * k[S1] / (2 * max(x2, 1e-300) ** 2))
    return replace(base, gamma1=gamma, gamma2=gamma), kappa0


@dataclass
class DeepReport:
    losses: list
    accuracies: list
    theta: float
    network: DeepNetwork
    train_accuracy: float
    test_accuracy: float
    theta_refit: float
    polarity: int
    restarts: list = field(default_factory=list)

    def to_dict(self):
        d = {
            "losses": self.losses,
            "train_error": [1 - a for a in self.accuracies],
            "theta": self.theta,
            "theta_refit": self.theta_refit,
            "polarity": self.polarity,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "restarts": self.restarts,
        }
        d.update(self.network.to_dict())
        return d


def deep_objective(param: DeepParam, F, y, n_steps):
    cfg = param.cfg

    def fun(x):
        net, theta = param.unpack(x)
        try:
            fw = deep_forward(net, F, n_steps, cfg.dt)
            L, dE, dth = logistic_loss(fw.energy, y, theta, cfg.loss_scale)
            dg = deep_gradient(net, F, fw, dE)
        except (BlowupError, ArithmeticError):
            return math.inf, None
        g = param.chain(x, net, dg)
        g[-1] = dth
        fun.last = (x.copy(), fw.energy)
        return L, g

    fun.last = None
    return fun


def train_deep(cfg: DeepConfig, train, test, physics: PhysicsConfig = PhysicsConfig()) -> DeepReport:
    """Steepest descent with backtracking over both geometries, string/cantilever stiffnesses, gains and theta."""
    from .optim import GradientDescent
    from .training import evaluate_energies, fit_threshold

    n_steps = cfg.n_steps or train.forcings.shape[1]
    results = []
    for r in range(cfg.restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r]))
        ga = random_geometry(*cfg.shape, seed=rng)
        gb = random_geometry(*cfg.shape, seed=rng)
        base, kappa0 = calibrate(cfg, physics, train.forcings, (ga, gb))
        param = DeepParam(cfg, physics, base, kappa0)
        x0 = param.pack(ga, gb, 0.0)
        net0, _ = param.unpack(x0)
        E0 = deep_forward(net0, train.forcings, n_steps, cfg.dt).energy
        x0[-1] = float(np.median(np.log(E0[E0 > 0])))
        fun = deep_objective(param, train.forcings, train.labels, n_steps)
        opt = GradientDescent(fun, x0, step=cfg.step)
        losses, accs = [], []

        def record():
            E = fun.last[1] if fun.last is not None and np.array_equal(fun.last[0], opt.x) else deep_forward(param.unpack(opt.x)[0], train.forcings, n_steps, cfg.dt).energy
            losses.append(float(opt.f))
            accs.append(evaluate_energies(E, train.labels, opt.x[-1]).accuracy)

        record()
        for _ in range(cfg.iterations):
            if not opt.step():
                break
            record()
        net, theta = param.unpack(opt.x)
        Etr = deep_forward(net, train.forcings, n_steps, cfg.dt).energy
        th, pol, _ = fit_threshold(Etr, train.labels)
        tr_acc = evaluate_energies(Etr, train.labels, th, pol).accuracy
        Ete = deep_forward(net, test.forcings, cfg.n_steps or test.forcings.shape[1], cfg.dt).energy
        te_acc = evaluate_energies(Ete, test.labels, th, pol).accuracy
        results.append(DeepReport(losses, accs, theta, net, tr_acc, te_acc, th, pol))
    best = max(results, key=lambda rep: rep.train_accuracy)
    best.restarts = [{"index": i, "train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy, "final_loss": rep.losses[-1]} for i, rep in enumerate(results)]
    return best
