"""Fine-grained mass-spring models standing in for full finite-element discretizations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..errors import ContractError


@dataclass
class FineModel:
    """Symmetric ``(M, K)`` with a DOF-to-site map and optional per-component boundary sets."""

    M: np.ndarray
    K: np.ndarray
    site_map: np.ndarray | None = None
    boundary_sets: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.M = np.asarray(self.M, float)
        self.K = np.asarray(self.K, float)
        n = self.M.shape[0]
        if self.M.shape != (n, n) or self.K.shape != (n, n):
            raise ContractError("M and K must be square and of equal size")
        self.site_map = np.zeros(n, int) if self.site_map is None else np.asarray(self.site_map, int)
        if self.site_map.shape != (n,) or (self.site_map < 0).any():
            raise ContractError("site_map must assign every DOF to a site")

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def n_sites(self) -> int:
        return int(self.site_map.max()) + 1

    def projectors(self):
        """Boolean DOF masks, one per site (the diagonals of the site projectors)."""
        return [self.site_map == j for j in range(self.n_sites)]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "M": _encode(self.M),
            "K": _encode(self.K),
            "site_map": self.site_map.tolist(),
            "boundary_sets": [list(map(int, b)) for b in self.boundary_sets],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "FineModel":
        n = int(d["n"])
        return cls(_decode(d["M"], n), _decode(d["K"], n), np.array(d["site_map"], int), [list(b) for b in d.get("boundary_sets", [])], d.get("meta", {}))


def _encode(A):
    """Dense list-of-rows, or coordinate triplets when less than 10% of entries are nonzero."""
    nz = np.count_nonzero(A)
    if nz < 0.1 * A.size:
        r, c = np.nonzero(A)
        return {"format": "coo", "row": r.tolist(), "col": c.tolist(), "data": A[r, c].tolist()}
    return {"format": "dense", "data": A.tolist()}


def _decode(d, n):
    if d["format"] == "coo":
        return sparse.coo_matrix((d["data"], (d["row"], d["col"])), shape=(n, n)).toarray()
    if d["format"] == "dense":
        return np.array(d["data"], float)
    raise ContractError(f"unknown matrix format {d['format']!r}")


def chain_lattice(rows=7, cols=7, seed=0, k_ground=1.0, k_internal=1.0, k_site=0.01, mass=1.0, disorder=0.03) -> FineModel:
    """Lattice of sites, each a grounded three-mass chain, coupled by weak springs between end masses.

    Each isolated chain has squared frequencies ``(k_ground + k_internal * l) / mass``
    with ``l`` in {0, 1, 3}; the weak inter-site springs broaden the lowest
    level into an isolated band of exactly ``rows * cols`` modes. Site
    parameters carry seeded multiplicative disorder of relative size
    ``disorder``.
    """
    rng = np.random.default_rng(seed)
    n_sites = rows * cols
    n = 3 * n_sites
    M = np.zeros((n, n))
    K = np.zeros((n, n))

    def spring(a, b, k):
        K[a, a] += k
        K[b, b] += k
        K[a, b] -= k
        K[b, a] -= k

    for s in range(n_sites):
        base = 3 * s
        f = 1.0 + disorder * rng.uniform(-1, 1, 3)
        for i in range(3):
            M[base + i, base + i] = mass * f[0]
            K[base + i, base + i] += k_ground * f[1]
        spring(base, base + 1, k_internal * f[2])
        spring(base + 1, base + 2, k_internal * f[2])
    for s in range(n_sites):
        r, c = divmod(s, cols)
        if c + 1 < cols:
            spring(3 * s + 2, 3 * (s + 1), k_site)
        if r + 1 < rows:
            spring(3 * s + 1, 3 * (s + cols) + 1, k_site)
    site_map = np.repeat(np.arange(n_sites), 3)
    w_lo = np.sqrt(k_ground * (1 - disorder) / (mass * (1 + disorder)))
    w_hi = np.sqrt((k_ground * (1 + disorder) + 8 * k_site) / (mass * (1 - disorder)))
    band = (0.97 * w_lo / (2 * np.pi), 1.03 * w_hi / (2 * np.pi))
    return FineModel(M, K, site_map, meta={"shape": [rows, cols], "seed": seed, "band": list(band)})


def dimer(k=1.0, coupling=0.01, mass=1.0) -> FineModel:
    """Two identical 1-DOF sites joined by a weak spring."""
    K = np.array([[k + coupling, -coupling], [-coupling, k + coupling]])
    return FineModel(np.eye(2) * mass, K, np.array([0, 1]))


def grid_membrane(nx=40, ny=40, k=1.0, mass=1.0):
    """Free ``nx x ny`` grid of unit masses with nearest-neighbour springs.

    Returns ``(M, K, springs)`` with ``springs`` an ``(E, 2)`` array of node pairs.
    """
    idx = np.arange(nx * ny).reshape(ny, nx)
    pairs = np.concatenate([np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1), np.stack([idx[:-1].ravel(), idx[1:].ravel()], 1)])
    n = nx * ny
    K = np.zeros((n, n))
    a, b = pairs[:, 0], pairs[:, 1]
    np.add.at(K, (a, a), k)
    np.add.at(K, (b, b), k)
    np.add.at(K, (a, b), -k)
    np.add.at(K, (b, a), -k)
    return np.eye(n) * mass, K, pairs
