"""Per-element quadratic surrogate of the effective mass and stiffness matrices.

Each structural entry of K and each diagonal mass is modelled as
``a + b . p_r + p_r^T C p_r`` over the geometric parameters ``p_r`` lying
within graph distance two of the entry's sites. Mass and stiffness are fitted
separately so both stay symmetric and the predicted pencil keeps real
eigenvalues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import ContractError, DegeneracyError, InsufficientDataError
from .model import EffectiveModel, Geometry, lattice_edges, n_geometry_params

SURROGATE_VERSION = 1


def _site_distances(shape, site):
    rows, cols = shape
    r0, c0 = divmod(site, cols)
    rr, cc = np.divmod(np.arange(rows * cols), cols)
    return np.abs(rr - r0) + np.abs(cc - c0)


def feature_distances(shape, site) -> np.ndarray:
    """Distance of every geometric parameter (holes, then beams) from one site."""
    dist = _site_distances(shape, site)
    out = np.empty(n_geometry_params(shape), dtype=int)
    out[: dist.size] = dist
    for a, b, j in lattice_edges(shape):
        out[j] = min(dist[a], dist[b])
    return out


def relevant_params(shape, element, max_distance=2) -> list[int]:
    """Sorted indices of the geometric parameters relevant to matrix element ``(i, j)``."""
    i, j = element
    n = shape[0] * shape[1]
    if not (0 <= i < n and 0 <= j < n):
        raise ContractError(f"element {element} outside a {shape[0]}x{shape[1]} lattice")
    if i != j and abs(_site_distances(shape, i)[j]) != 1:
        raise ContractError(f"element {element} is not a diagonal or nearest-neighbour pair")
    near = (feature_distances(shape, i) <= max_distance) | (feature_distances(shape, j) <= max_distance)
    return np.flatnonzero(near).tolist()


def n_features(k: int) -> int:
    return 1 + k + k * (k + 1) // 2


def quadratic_features(P: np.ndarray) -> np.ndarray:
    """``[1, p, p_a p_b (a <= b)]`` for each row of ``P``."""
    iu, ju = np.triu_indices(P.shape[1])
    return np.hstack([np.ones((P.shape[0], 1)), P, P[:, iu] * P[:, ju]])


@dataclass
class Element:
    i: int
    j: int
    idx: np.ndarray
    a: float
    b: np.ndarray
    C: np.ndarray

    def value(self, p):
        q = p[self.idx]
        return self.a + self.b @ q + q @ self.C @ q

    def gradient(self, p):
        q = p[self.idx]
        return self.b + (self.C + self.C.T) @ q

    def to_dict(self):
        return {"i": self.i, "j": self.j, "idx": self.idx.tolist(), "a": self.a, "b": self.b.tolist(), "C": self.C.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["i"]), int(d["j"]), np.array(d["idx"], dtype=int), float(d["a"]), np.array(d["b"], float), np.array(d["C"], float))


@dataclass
class CorrectionState:
    """Additive offsets blended toward the oracle: ``Delta = alpha (oracle - surrogate)``."""

    dK: np.ndarray
    dM: np.ndarray
    alpha: float = 0.0
    count: int = 0
    period: int = 30
    ramp: int = 5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("blend factor must lie in [0, 1]")


@dataclass
class SurrogateModel:
    shape: tuple[int, int]
    K: list[Element]
    M: list[Element]
    damping_rate: float
    w_in: np.ndarray
    i_out: int
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_params(self) -> int:
        return n_geometry_params(self.shape)

    def matrices(self, g: Geometry):
        """Raw (uncorrected) predictions ``(K, M)``."""
        self._check(g)
        p = g.to_vector()
        K = np.zeros((self.n, self.n))
        for e in self.K:
            K[e.i, e.j] = K[e.j, e.i] = e.value(p)
        M = np.zeros((self.n, self.n))
        for e in self.M:
            M[e.i, e.j] = M[e.j, e.i] = e.value(p)
        return K, M

    def _check(self, g):
        if tuple(g.shape) != tuple(self.shape):
            raise ContractError(f"geometry {g.shape} does not match surrogate {self.shape}")

    def to_dict(self) -> dict:
        return {
            "version": SURROGATE_VERSION,
            "shape": list(self.shape),
            "damping_rate": self.damping_rate,
            "w_in": self.w_in.tolist(),
            "i_out": self.i_out,
            "K": [e.to_dict() for e in self.K],
            "M": [e.to_dict() for e in self.M],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "SurrogateModel":
        if d.get("version") != SURROGATE_VERSION:
            raise ContractError(f"unsupported surrogate version {d.get('version')!r}")
        return cls(
            tuple(d["shape"]),
            [Element.from_dict(e) for e in d["K"]],
            [Element.from_dict(e) for e in d["M"]],
            float(d["damping_rate"]),
            np.array(d["w_in"], float),
            int(d["i_out"]),
            d.get("meta", {}),
        )


def _solve(Phi, Y, ridge):
    """Ridge-regularized least squares via QR of the augmented feature matrix."""
    k = Phi.shape[1]
    A = np.vstack([Phi, math.sqrt(ridge) * np.eye(k)])
    rhs = np.vstack([Y, np.zeros((k, Y.shape[1]))])
    Q, R = qr(A, mode="economic")
    return solve_triangular(R, Q.T @ rhs)


def _unpack(coef, k):
    a = coef[0]
    b = coef[1 : 1 + k]
    C = np.zeros((k, k))
    iu, ju = np.triu_indices(k)
    w = coef[1 + k :]
    C[iu, ju] = np.where(iu == ju, w, 0.5 * w)
    C[ju, iu] = C[iu, ju]
    return float(a), b.copy(), C


def structural_elements(shape):
    """K elements (upper triangle, diagonal first) and M elements (diagonal)."""
    n = shape[0] * shape[1]
    K = [(i, i) for i in range(n)] + sorted((min(a, b), max(a, b)) for a, b, _ in lattice_edges(shape))
    return K, [(i, i) for i in range(n)]


def fit(train, shape, ridge=1e-10) -> SurrogateModel:
    """Fit every element by least squares on ``[(Geometry, EffectiveModel), ...]``.

    Elements sharing a relevant-parameter set share one QR factorisation.
    """
    shape = tuple(shape)
    if not train:
        raise InsufficientDataError("no training lattices")
    P = np.array([g.to_vector() for g, _ in train])
    Ks = np.array([m.K for _, m in train])
    Ms = np.array([m.M for _, m in train])
    Kel, Mel = structural_elements(shape)
    groups: dict[tuple, list] = {}
    for kind, elems in (("K", Kel), ("M", Mel)):
        for e in elems:
            groups.setdefault(tuple(relevant_params(shape, e)), []).append((kind, e))
    fitted = {"K": {}, "M": {}}
    for idx, members in groups.items():
        k = len(idx)
        if len(train) <= n_features(k):
            kind, e = members[0]
            raise InsufficientDataError(f"element {kind}{e} needs more than {n_features(k)} lattices, got {len(train)}")
        Phi = quadratic_features(P[:, list(idx)])
        Y = np.column_stack([(Ks if kind == "K" else Ms)[:, e[0], e[1]] for kind, e in members])
        coef = _solve(Phi, Y, ridge)
        for col, (kind, e) in enumerate(members):
            a, b, C = _unpack(coef[:, col], k)
            fitted[kind][e] = Element(e[0], e[1], np.array(idx, dtype=int), a, b, C)
    ref = train[0][1]
    damping = float(np.mean(np.diag(ref.B) / np.diag(ref.M)))
    return SurrogateModel(
        shape,
        [fitted["K"][e] for e in Kel],
        [fitted["M"][e] for e in Mel],
        damping,
        ref.w_in.copy(),
        ref.i_out,
        {"n_train": len(train), "ridge": ridge},
    )


def predict(s: SurrogateModel, g: Geometry, correction: CorrectionState | None = None) -> EffectiveModel:
    """Evaluate the surrogate (plus any active correction offsets) as an effective model."""
    K, M = s.matrices(g)
    if correction is not None:
        K = K + correction.dK
        M = M + correction.dM
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise DegeneracyError("predicted mass matrix is not positive definite") from None
    return EffectiveModel(M=M, K=K, B=s.damping_rate * M, w_in=s.w_in, i_out=s.i_out, shape=s.shape)


def jacobian(s: SurrogateModel, g: Geometry):
    """Derivatives ``(dK, dM)`` of the predicted matrices, shapes ``(P, n, n)`` and ``(P, n)``."""
    s._check(g)
    p = g.to_vector()
    dK = np.zeros((s.n_params, s.n, s.n))
    dM = np.zeros((s.n_params, s.n))
    for e in s.K:
        gr = e.gradient(p)
        dK[e.idx, e.i, e.j] = gr
        dK[e.idx, e.j, e.i] = gr
    for e in s.M:
        dM[e.idx, e.i] = e.gradient(p)
    return dK, dM


def apply_correction(state: CorrectionState | None, g: Geometry, oracle, s: SurrogateModel, period=30, ramp=5) -> CorrectionState:
    """Re-anchor the surrogate on ``oracle(g)``; the blend factor ramps linearly to 1 over ``ramp`` corrections."""
    count = 1 if state is None else state.count + 1
    alpha = min(1.0, count / ramp) if ramp > 0 else 1.0
    truth = oracle(g)
    K, M = s.matrices(g)
    return CorrectionState(alpha * (truth.K - K), alpha * (truth.M - M), alpha, count, period if state is None else state.period, ramp)


def frobenius_residual(s: SurrogateModel, test) -> float:
    """Mean ``||K_true - K_pred||_F`` over ``[(Geometry, EffectiveModel), ...]``."""
    return float(np.mean([np.linalg.norm(m.K - s.matrices(g)[0]) for g, m in test]))
