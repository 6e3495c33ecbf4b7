"""Adjoint (time-reversal) gradients with square-root checkpointing.

The backward pass integrates the adjoint field with the transposed RK4 stages
of the forward scheme, so the gradient is exact for the discrete forward map
and agrees with finite differences of the simulator to rounding error. The
parameter gradient ``int u . df/dp dt`` is accumulated with the RK4 stage
weights. Forward states are stored only at interval boundaries and every
interval is replayed densely when the backward sweep enters it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowupError, ContractError
from .loss import loss as logistic_loss
from .model import EffectiveModel, structural_mask
from .simulator import DEFAULT_DT, LinearDynamics, StageBuffer, prepare_forcing, rk4_batch_step, simulate_batch


@dataclass
class CheckpointStore:
    """Forward states saved every ``interval`` steps, plus the forward energies."""

    interval: int
    saved_states: list
    n_steps: int
    dt: float
    energy: np.ndarray
    peak_states: int = 0

    @property
    def n_intervals(self) -> int:
        return -(-self.n_steps // self.interval)


@dataclass
class GradientVector:
    """Loss gradients w.r.t. an effective model.

    ``dK`` and ``dB`` use the symmetric-pair convention: the off-diagonal entry
    ``[a, b]`` (= ``[b, a]``) is the derivative w.r.t. the pair parameter that
    sets both ``K[a, b]`` and ``K[b, a]``. ``dM`` holds diagonal masses only.
    """

    dK: np.ndarray
    dM: np.ndarray
    dB: np.ndarray
    dtheta: float = 0.0
    extra: dict = field(default_factory=dict)

    def tied_mass(self, damping_rate: float) -> np.ndarray:
        """Mass gradient when ``B = damping_rate * M`` is tied to the masses."""
        return self.dM + damping_rate * np.diag(self.dB)


def default_interval(n_steps: int) -> int:
    return max(1, math.ceil(math.sqrt(n_steps)))


def forward_pass(dyn, forcing, n_steps, dt=DEFAULT_DT, interval=None, r0=None) -> CheckpointStore:
    """Forward integration storing checkpoints every ``interval`` (default ceil(sqrt(N))) steps."""
    interval = default_interval(n_steps) if interval is None else int(interval)
    E, cps, _ = simulate_batch(dyn, forcing, dt, n_steps, r0=r0, interval=interval)
    store = CheckpointStore(interval=interval, saved_states=cps, n_steps=n_steps, dt=dt, energy=E)
    store.peak_states = len(cps)
    return store


def _reverse_step(dyn, lam, Y, j, h, Z):
    """Transpose of one RK4 step; writes the stage auxiliaries into ``Z[4j:4j+4]``."""
    b = 4 * j
    kb4 = (h / 6.0) * lam
    y4b, Z[b + 3] = dyn.vjp(Y[b + 3], kb4)
    kb3 = (h / 3.0) * lam + h * y4b
    y3b, Z[b + 2] = dyn.vjp(Y[b + 2], kb3)
    kb2 = (h / 3.0) * lam + (0.5 * h) * y3b
    y2b, Z[b + 1] = dyn.vjp(Y[b + 1], kb2)
    kb1 = (h / 6.0) * lam + (0.5 * h) * y2b
    y1b, Z[b] = dyn.vjp(Y[b], kb1)
    return lam + y1b + y2b + y3b + y4b


def adjoint_batch(dyn, forcing, store: CheckpointStore, weights):
    """Backward sweep for ``sum_s weights[s] * E_s``.

    Returns ``(grads, lam0, peak_states)`` where ``grads`` is the dynamics'
    parameter-gradient dictionary and ``lam0`` the adjoint of the initial state.
    """
    N, L, h = store.n_steps, store.interval, store.dt
    if len(store.saved_states) != store.n_intervals + 1:
        raise ContractError(f"expected {store.n_intervals + 1} checkpoints, got {len(store.saved_states)}")
    F = prepare_forcing(forcing, N)
    S = F.shape[0]
    weights = np.asarray(weights, dtype=float).reshape(S)
    if store.saved_states[0].shape != (dyn.dim, S):
        raise ContractError("checkpoint shape does not match dynamics and batch size")
    src = 2.0 * h * weights
    out = dyn.out
    if hasattr(dyn, "propagator"):
        return _adjoint_linear(dyn, F, store, src)
    grads = dyn.new_grads()
    buf = StageBuffer(Y=np.empty((4 * L, dyn.dim, S)), Kst=np.empty((4 * L, dyn.dim, S)), R=np.empty((L, dyn.dim, S)))
    Z = np.empty((4 * L, getattr(dyn, "aux_dim", dyn.n), S))
    lam = np.zeros((dyn.dim, S))
    for j in reversed(range(store.n_intervals)):
        k0 = j * L
        m = min(N, k0 + L) - k0
        r = store.saved_states[j]
        for i in range(m):
            r = rk4_batch_step(dyn, r, F, k0 + i, h, buf, i)
        for i in reversed(range(m)):
            # source from the readout at state k0 + i + 1
            x_next = r[out] if i == m - 1 else buf.R[i + 1][out]
            lam[out] += src * x_next
            lam = _reverse_step(dyn, lam, buf.Y, i, h, Z)
        if not np.isfinite(lam).all():
            raise BlowupError("non-finite adjoint state", step=k0)
        dyn.accumulate(grads, _columns(buf.Y[: 4 * m]), _columns(buf.Kst[: 4 * m]), _columns(Z[: 4 * m]))
    peak = len(store.saved_states) + L
    return grads, lam, peak


def _columns(A):
    """``(T, d, S) -> (d, T*S)``."""
    return np.moveaxis(A, 1, 0).reshape(A.shape[1], -1)


def _adjoint_linear(dyn, F, store, src):
    """Backward sweep for linear time-invariant dynamics.

    Each step is ``r' = P r + Q (s0, sm, s1)``, so the parameter gradient
    ``sum_k lam'_k . d(step)/dp`` is bilinear and only needs the correlations
    ``C = sum_k lam'_k r_k^T`` and ``c = sum_k lam'_k (s0, sm, s1)_k^T``. One
    transposed RK4 stage pass over the ``2n + 3`` columns of ``[C, c]`` then
    gives the same stage-weighted quadrature as a per-step sweep.
    """
    N, L, h = store.n_steps, store.interval, store.dt
    P, a, b = dyn.propagator(h)
    PT = np.ascontiguousarray(P.T)
    dim, S = dyn.dim, F.shape[0]
    out = dyn.out
    R = np.empty((dim, L, S))
    LAM = np.empty((dim, L, S))
    C = np.zeros((dim, dim))
    c = np.zeros((dim, 3))
    lam = np.zeros((dim, S))
    for j in reversed(range(store.n_intervals)):
        k0 = j * L
        m = min(N, k0 + L) - k0
        _, X = _replay(P, a, b, F, store.saved_states[j], k0, m, R)
        for i in reversed(range(m)):
            lam[out] += src * X[i, out]
            LAM[:, i] = lam
            lam = PT @ lam
        if not np.isfinite(lam).all():
            raise BlowupError("non-finite adjoint state", step=k0)
        Lm = LAM[:, :m].reshape(dim, m * S)
        C += Lm @ R[:, :m].reshape(dim, m * S).T
        s0 = F[:, k0 : k0 + m].T.ravel()
        s1 = F[:, k0 + 1 : k0 + m + 1].T.ravel()
        c += Lm @ np.stack([s0, 0.5 * (s0 + s1), s1], axis=1)
    grads = dyn.new_grads()
    cols = np.zeros((dim, dim + 3))
    cols[:, :dim] = np.eye(dim)
    e = np.zeros((3, dim + 3))
    e[:, dim:] = np.eye(3)
    _stage_gradients(dyn, grads, cols, np.hstack([C, c]), e[0], e[1], e[2], h)
    return grads, lam, len(store.saved_states) + L


def _replay(P, a, b, F, r, k0, m, R):
    from .simulator import linear_steps

    return linear_steps(P, a, b, F, r, k0, m, R)


def _stage_gradients(dyn, grads, R, LAM, s0, sm, s1, h, G=None):
    """Accumulate ``sum_i kbar_i . df/dp(y_i)`` for column-stacked steps ``R -> R'`` with adjoints ``LAM``.

    ``G`` (optional, shape ``(4, cols)``) holds extra adjoints of the output
    coordinate of the four stage inputs, for callers that read stage values.
    """
    out = dyn.out
    K1 = dyn.rhs(R, s0)
    Y2 = R + (0.5 * h) * K1
    K2 = dyn.rhs(Y2, sm)
    Y3 = R + (0.5 * h) * K2
    K3 = dyn.rhs(Y3, sm)
    Y4 = R + h * K3
    K4 = dyn.rhs(Y4, s1)
    kb4 = (h / 6.0) * LAM
    y4b, z = dyn.vjp(Y4, kb4)
    dyn.accumulate(grads, Y4, K4, z)
    if G is not None:
        y4b[out] += G[3]
    kb3 = (h / 3.0) * LAM + h * y4b
    y3b, z = dyn.vjp(Y3, kb3)
    dyn.accumulate(grads, Y3, K3, z)
    if G is not None:
        y3b[out] += G[2]
    kb2 = (h / 3.0) * LAM + (0.5 * h) * y3b
    y2b, z = dyn.vjp(Y2, kb2)
    dyn.accumulate(grads, Y2, K2, z)
    if G is not None:
        y2b[out] += G[1]
    kb1 = (h / 6.0) * LAM + (0.5 * h) * y2b
    _, z = dyn.vjp(R, kb1)
    dyn.accumulate(grads, R, K1, z)


def _pair_convention(G, mask):
    P = G + G.T
    P[np.diag_indices_from(P)] = np.diag(G)
    return np.where(mask, P, 0.0)


def adjoint_backward(model: EffectiveModel, forcing, fwd: CheckpointStore, loss_grad_wrt_output) -> GradientVector:
    """Gradient of ``sum_s g_s E_s`` w.r.t. K (pairs), diagonal M and B, with ``g = dL/dE``."""
    dyn = LinearDynamics(model)
    grads, _, peak = adjoint_batch(dyn, forcing, fwd, loss_grad_wrt_output)
    fwd.peak_states = max(fwd.peak_states, peak)
    mask = structural_mask(model.shape) if model.shape is not None else np.ones((model.n, model.n), bool)
    dB = _pair_convention(grads["GB"], np.ones_like(mask))
    return GradientVector(dK=_pair_convention(grads["GK"], mask), dM=grads["dM"].copy(), dB=dB)


def loss_and_gradient(model: EffectiveModel, forcings, labels, theta, n_steps=None, dt=DEFAULT_DT, interval=None, scale=1.0):
    """Forward + adjoint for the logistic loss over a batch.

    Returns ``(L, energies, GradientVector)`` with ``dtheta`` filled in.
    """
    forcings = np.atleast_2d(forcings)
    n_steps = forcings.shape[1] if n_steps is None else n_steps
    dyn = LinearDynamics(model)
    store = forward_pass(dyn, forcings, n_steps, dt, interval)
    L, dE, dth = logistic_loss(store.energy, labels, theta, scale)
    gv = adjoint_backward(model, forcings, store, dE)
    gv.dtheta = dth
    return L, store.energy, gv


def checkpointed_equals_dense(model: EffectiveModel, forcing, n_steps=None, dt=DEFAULT_DT, weights=None):
    """Compare sqrt(N)-checkpointed and fully stored backward passes.

    Returns ``(max_relative_difference, peak_states_checkpointed)``.
    """
    forcing = np.atleast_2d(forcing)
    n_steps = forcing.shape[1] if n_steps is None else n_steps
    weights = np.ones(forcing.shape[0]) if weights is None else weights
    dyn = LinearDynamics(model)
    results = []
    peaks = []
    for interval in (default_interval(n_steps), 1):
        store = forward_pass(dyn, forcing, n_steps, dt, interval)
        grads, _, peak = adjoint_batch(dyn, forcing, store, weights)
        results.append(np.concatenate([grads["GK"].ravel(), grads["GB"].ravel(), grads["dM"]]))
        peaks.append(peak)
    a, b = results
    scale = np.abs(b).max()
    rel = 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)
    return rel, peaks[0]


def gradcheck(model: EffectiveModel, forcings, labels, theta, n_steps=None, dt=DEFAULT_DT, rel_step=1e-6):
    """Adjoint gradient vs central finite differences over every K pair, mass and theta.

    The FD step for a matrix entry is ``rel_step * max(|p|, mean |diag|)`` of
    that matrix so that near-zero couplings still get a well-scaled step.
    Returns a list of dicts ``{param, adjoint, fd, rel_err}``.
    """
    forcings = np.atleast_2d(forcings)
    n_steps = forcings.shape[1] if n_steps is None else n_steps
    _, _, gv = loss_and_gradient(model, forcings, labels, theta, n_steps, dt)
    dyn_cache = {}

    def L_of(m, th):
        key = id(m)
        dyn = dyn_cache.get(key) or LinearDynamics(m)
        E = simulate_batch(dyn, forcings, dt, n_steps)[0]
        return logistic_loss(E, labels, th)[0]

    rows = []
    mask = structural_mask(model.shape) if model.shape is not None else np.ones((model.n, model.n), bool)
    kscale = np.abs(np.diag(model.K)).mean()
    mscale = np.abs(np.diag(model.M)).mean()
    for a in range(model.n):
        for b in range(a, model.n):
            if not mask[a, b]:
                continue
            delta = rel_step * max(abs(model.K[a, b]), kscale)
            E = np.zeros((model.n, model.n))
            E[a, b] = E[b, a] = delta
            fd = (L_of(model.replace(K=model.K + E), theta) - L_of(model.replace(K=model.K - E), theta)) / (2 * delta)
            rows.append(_row(f"K[{a},{b}]", gv.dK[a, b], fd))
    for a in range(model.n):
        delta = rel_step * max(abs(model.M[a, a]), mscale)
        E = np.zeros((model.n, model.n))
        E[a, a] = delta
        fd = (L_of(model.replace(M=model.M + E), theta) - L_of(model.replace(M=model.M - E), theta)) / (2 * delta)
        rows.append(_row(f"M[{a},{a}]", gv.dM[a], fd))
    delta = rel_step * max(abs(theta), 1.0)
    fd = (L_of(model, theta + delta) - L_of(model, theta - delta)) / (2 * delta)
    rows.append(_row("theta", gv.dtheta, fd))
    return rows


def _row(name, adj, fd):
    adj, fd = float(adj), float(fd)
    den = max(abs(adj), abs(fd))
    return {"param": name, "adjoint": adj, "fd": fd, "rel_err": 0.0 if den == 0 else abs(adj - fd) / den}


def gradcheck_problem(shape=(3, 3), n_steps=2000, seed=1, physics=None, dt=DEFAULT_DT):
    """Reference gradient-check setup: an oracle lattice driven by four windowed tones.

    Returns ``(model, forcings, labels, theta)`` with ``theta`` at the mean log-energy.
    """
    from .model import PhysicsConfig, oracle_effective_model, random_geometry

    physics = PhysicsConfig() if physics is None else physics
    model = oracle_effective_model(random_geometry(*shape, seed=seed), physics)
    t = np.arange(n_steps + 1) * dt
    win = np.exp(-(((t - t.mean()) / (np.ptp(t) / 5)) ** 2))
    F = np.array([np.sin(2 * np.pi * f * t) * win for f in (66e3, 71e3, 68e3, 70e3)])
    y = np.array([1, -1, 1, -1])
    E = simulate_batch(LinearDynamics(model), F, dt, n_steps)[0]
    return model, F, y, float(np.mean(np.log(E)))
