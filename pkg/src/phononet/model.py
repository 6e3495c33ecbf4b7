"""Lattice geometry, effective mass-spring models and the closed-form fabrication oracle.

The oracle maps normalized geometric parameters to an effective model. It stands
in for a full finite-element extraction: smooth, deterministic, and deliberately
not quadratic so that a quadratic surrogate fitted to it is only approximate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ContractError


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PhysicsConfig:
    """Constants of the virtual-fabrication oracle.

    Frequencies in Hz. Masses are normalized so that an untouched site has
    unit mass; stiffnesses follow from the target on-site frequency.
    """

    f0: float = 68.5e3
    Q: float = 1000.0
    m0: float = 1.0
    coupling_ratio: float = 0.15
    cross_ratio: float = 0.02
    stiffness_softening: float = 0.55
    mass_softening: float = 0.30
    coupling_steepness: float = 3.0
    input_mask: str = "perimeter"
    output_site: str = "center"

    @property
    def omega0(self) -> float:
        return 2.0 * math.pi * self.f0

    @property
    def k0(self) -> float:
        return self.m0 * self.omega0**2

    @property
    def c0(self) -> float:
        return self.coupling_ratio * self.k0

    @property
    def eps(self) -> float:
        # cross-term strength relative to k0 (see coupling())
        return self.cross_ratio * self.k0

    @property
    def damping_rate(self) -> float:
        """Mass-proportional damping factor, B = damping_rate * M."""
        return self.omega0 / self.Q


@dataclass(frozen=True)
class Geometry:
    """Per-site hole sizes ``d`` and beam positions ``h`` (horizontal) and ``v`` (vertical).

    ``h[r, c]`` is the beam between sites (r, c) and (r, c+1); ``v[r, c]`` joins
    (r, c) and (r+1, c). Values are clamped to [0, 1] on construction.
    """

    d: np.ndarray
    h: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.d, dtype=float))
        rows, cols = d.shape
        h = np.asarray(self.h, dtype=float).reshape(rows, max(cols - 1, 0))
        v = np.asarray(self.v, dtype=float).reshape(max(rows - 1, 0), cols)
        for name, a in (("d", d), ("h", h), ("v", v)):
            if not np.all(np.isfinite(a)):
                raise ContractError(f"geometry parameter {name} has non-finite values")
            object.__setattr__(self, name, _frozen(np.clip(a, 0.0, 1.0)))

    @property
    def rows(self) -> int:
        return self.d.shape[0]

    @property
    def cols(self) -> int:
        return self.d.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape

    @property
    def n_params(self) -> int:
        return self.d.size + self.h.size + self.v.size

    def to_vector(self) -> np.ndarray:
        """Flatten to ``[d, h, v]`` in row-major order."""
        return np.concatenate([self.d.ravel(), self.h.ravel(), self.v.ravel()])

    @classmethod
    def from_vector(cls, p, shape) -> "Geometry":
        rows, cols = shape
        p = np.asarray(p, dtype=float)
        if p.size != n_geometry_params(shape):
            raise ContractError(f"parameter vector of length {p.size} does not fit a {rows}x{cols} lattice")
        nd, nh = rows * cols, rows * (cols - 1)
        return cls(p[:nd].reshape(rows, cols), p[nd : nd + nh].reshape(rows, cols - 1), p[nd + nh :].reshape(rows - 1, cols))

    @classmethod
    def uniform(cls, rows, cols, value=0.5) -> "Geometry":
        return cls(np.full((rows, cols), value), np.full((rows, cols - 1), value), np.full((rows - 1, cols), value))

    def to_csv(self) -> str:
        """One line per site: ``row,col,d,h,v``; missing beams are left empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "col", "d", "h", "v"])
        for r in range(self.rows):
            for c in range(self.cols):
                hv = repr(float(self.h[r, c])) if c < self.cols - 1 else ""
                vv = repr(float(self.v[r, c])) if r < self.rows - 1 else ""
                w.writerow([r, c, repr(float(self.d[r, c])), hv, vv])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Geometry":
        rows_ = list(csv.DictReader(io.StringIO(text)))
        if not rows_:
            raise ContractError("empty geometry CSV")
        rows = 1 + max(int(r["row"]) for r in rows_)
        cols = 1 + max(int(r["col"]) for r in rows_)
        d = np.zeros((rows, cols))
        h = np.zeros((rows, cols - 1))
        v = np.zeros((rows - 1, cols))
        for rec in rows_:
            r, c = int(rec["row"]), int(rec["col"])
            d[r, c] = float(rec["d"])
            if c < cols - 1:
                h[r, c] = float(rec["h"])
            if r < rows - 1:
                v[r, c] = float(rec["v"])
        return cls(d, h, v)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "d": self.d.tolist(), "h": self.h.tolist(), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Geometry":
        rows, cols = int(data["rows"]), int(data["cols"])
        return cls(
            np.asarray(data["d"], dtype=float).reshape(rows, cols),
            np.asarray(data["h"], dtype=float).reshape(rows, cols - 1),
            np.asarray(data["v"], dtype=float).reshape(rows - 1, cols),
        )


def n_geometry_params(shape) -> int:
    rows, cols = shape
    return rows * cols + rows * (cols - 1) + (rows - 1) * cols


def lattice_edges(shape) -> list[tuple[int, int, int]]:
    """Neighbour pairs ``(site_a, site_b, beam_param_index)``, horizontal beams first."""
    rows, cols = shape
    n = rows * cols
    edges = []
    for r in range(rows):
        for c in range(cols - 1):
            edges.append((r * cols + c, r * cols + c + 1, n + r * (cols - 1) + c))
    off = n + rows * (cols - 1)
    for r in range(rows - 1):
        for c in range(cols):
            edges.append((r * cols + c, (r + 1) * cols + c, off + r * cols + c))
    return edges


def structural_mask(shape) -> np.ndarray:
    """Boolean n x n pattern of allowed nonzeros in K (diagonal plus neighbours)."""
    n = shape[0] * shape[1]
    mask = np.eye(n, dtype=bool)
    for a, b, _ in lattice_edges(shape):
        mask[a, b] = mask[b, a] = True
    return mask


def input_weights(shape, mask="perimeter") -> np.ndarray:
    rows, cols = shape
    if mask == "perimeter":
        w = np.zeros((rows, cols))
        w[0, :] = w[-1, :] = 1.0
        w[:, 0] = w[:, -1] = 1.0
        return w.ravel()
    if mask == "all":
        return np.ones(rows * cols)
    raise ContractError(f"unknown input mask {mask!r}")


def output_index(shape, where="center") -> int:
    rows, cols = shape
    if where == "center":
        return (rows // 2) * cols + cols // 2
    if where == "corner":
        return rows * cols - 1
    raise ContractError(f"unknown output site {where!r}")


@dataclass(frozen=True)
class EffectiveModel:
    """Linear mass-spring model ``M x'' + B x' + K x = w_in s(t)`` read out at ``i_out``."""

    M: np.ndarray
    K: np.ndarray
    B: np.ndarray
    w_in: np.ndarray
    i_out: int
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("M", "K", "B"):
            object.__setattr__(self, name, _frozen(np.atleast_2d(getattr(self, name))))
        object.__setattr__(self, "w_in", _frozen(np.ravel(self.w_in)))
        n = self.M.shape[0]
        for name in ("M", "K", "B"):
            if getattr(self, name).shape != (n, n):
                raise ContractError(f"{name} must be {n}x{n}")
        if self.w_in.shape != (n,):
            raise ContractError(f"w_in must have length {n}")
        if not 0 <= self.i_out < n:
            raise ContractError(f"output index {self.i_out} out of range for n={n}")

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @cached_property
    def M_inv(self) -> np.ndarray:
        return np.linalg.inv(self.M)

    def replace(self, **changes) -> "EffectiveModel":
        kw = dict(M=self.M, K=self.K, B=self.B, w_in=self.w_in, i_out=self.i_out, shape=self.shape)
        kw.update(changes)
        return EffectiveModel(**kw)

    def eigenfrequencies(self) -> np.ndarray:
        """Undamped natural frequencies in Hz, ascending."""
        from scipy.linalg import eigh

        lam = eigh(self.K, self.M, eigvals_only=True)
        return np.sqrt(np.clip(lam, 0.0, None)) / (2 * math.pi)

    def check(self, tol=1e-9) -> None:
        """Raise ContractError if the structural invariants do not hold."""
        from scipy.linalg import eigh

        for name in ("M", "K", "B"):
            a = getattr(self, name)
            if not np.allclose(a, a.T, rtol=0, atol=tol * max(1.0, np.abs(a).max())):
                raise ContractError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(self.M).min() <= 0:
            raise ContractError("M is not positive definite")
        if np.linalg.eigvalsh(self.B).min() < -tol * max(1.0, np.abs(self.B).max()):
            raise ContractError("B is not positive semidefinite")
        if self.shape is not None and np.any(self.K[~structural_mask(self.shape)] != 0):
            raise ContractError("K has entries outside the lattice sparsity pattern")
        lam = eigh(self.K, self.M, eigvals_only=True)
        if lam.min() < -tol * max(1.0, np.abs(lam).max()):
            raise ContractError("pencil (K, M) has negative eigenvalues")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "M": self.M.tolist(),
            "K": self.K.tolist(),
            "B": self.B.tolist(),
            "w_in": self.w_in.tolist(),
            "i_out": self.i_out,
            "shape": list(self.shape) if self.shape else None,
        }

    @classmethod
    def from_dict(cls, data) -> "EffectiveModel":
        shape = tuple(data["shape"]) if data.get("shape") else None
        return cls(np.array(data["M"]), np.array(data["K"]), np.array(data["B"]), np.array(data["w_in"]), int(data["i_out"]), shape)


@dataclass(frozen=True)
class State:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(np.ravel(self.x)))
        object.__setattr__(self, "v", _frozen(np.ravel(self.v)))
        if self.x.shape != self.v.shape:
            raise ContractError("x and v must have equal length")

    @property
    def n(self) -> int:
        return self.x.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.v])

    @classmethod
    def from_vector(cls, r, t=0.0) -> "State":
        r = np.ravel(r)
        n = r.size // 2
        return cls(r[:n], r[n:], t)


def coupling(s, d_a, d_b, cfg: PhysicsConfig):
    """Signed spring constant of a beam at normalized position ``s``.

    Vanishes (up to the small hole cross term) when the beam sits on the
    vibration node at s = 0.5 and changes sign across it.
    """
    return cfg.c0 * np.tanh(cfg.coupling_steepness * (s - 0.5)) + cfg.eps * d_a * d_b


def oracle_effective_model(g: Geometry, cfg: PhysicsConfig = PhysicsConfig()) -> EffectiveModel:
    """Ground-truth effective model for a geometry."""
    d = g.d.ravel()
    p = g.to_vector()
    k = cfg.k0 * (1.0 - cfg.stiffness_softening * d**2)
    m = cfg.m0 * (1.0 - cfg.mass_softening * d**2)
    K = np.diag(k)
    for a, b, j in lattice_edges(g.shape):
        c = coupling(p[j], d[a], d[b], cfg)
        K[a, a] += abs(c)
        K[b, b] += abs(c)
        K[a, b] = K[b, a] = -c
    M = np.diag(m)
    return EffectiveModel(
        M=M,
        K=K,
        B=cfg.damping_rate * M,
        w_in=input_weights(g.shape, cfg.input_mask),
        i_out=output_index(g.shape, cfg.output_site),
        shape=g.shape,
    )


def oracle_jacobian(g: Geometry, cfg: PhysicsConfig = PhysicsConfig()):
    """Analytic derivatives of the oracle matrices.

    Returns ``(dK, dM)`` with shapes ``(P, n, n)`` and ``(P, n)``: derivative of
    every K entry and every mass with respect to each geometric parameter.
    ``|c|`` is differentiated as ``sign(c) dc`` (zero exactly at c = 0).
    """
    d = g.d.ravel()
    p = g.to_vector()
    n, P = d.size, p.size
    dK = np.zeros((P, n, n))
    dM = np.zeros((P, n))
    idx = np.arange(n)
    dK[idx, idx, idx] = -2.0 * cfg.k0 * cfg.stiffness_softening * d
    dM[idx, idx] = -2.0 * cfg.m0 * cfg.mass_softening * d
    for a, b, j in lattice_edges(g.shape):
        c = coupling(p[j], d[a], d[b], cfg)
        sg = np.sign(c)
        t = np.tanh(cfg.coupling_steepness * (p[j] - 0.5))
        for q, dc in ((j, cfg.c0 * cfg.coupling_steepness * (1 - t * t)), (a, cfg.eps * d[b]), (b, cfg.eps * d[a])):
            dK[q, a, a] += sg * dc
            dK[q, b, b] += sg * dc
            dK[q, a, b] -= dc
            dK[q, b, a] -= dc
    return dK, dM


def random_geometry(rows: int, cols: int, seed=None, low=0.05, high=0.95) -> Geometry:
    """Geometry with every parameter i.i.d. uniform on [low, high]."""
    if rows < 1 or cols < 1:
        raise ContractError("lattice needs at least one row and one column")
    rng = np.random.default_rng(seed)
    p = rng.uniform(low, high, n_geometry_params((rows, cols)))
    return Geometry.from_vector(p, (rows, cols))
