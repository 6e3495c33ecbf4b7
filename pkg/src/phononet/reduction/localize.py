"""Band eigenmodes, maximally localized site basis and congruence reduction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from ..errors import BandIsolationError, ContractError
from ..model import EffectiveModel
from .fine import FineModel

ISOLATION = 0.01


def band_modes(fine: FineModel, f_lo, f_hi, expect=None):
    """M-orthonormal eigenmodes with frequency in ``[f_lo, f_hi]``.

    The band must be isolated: every out-of-band frequency lies more than 1%
    (relative) away from the nearest in-band frequency. ``expect`` defaults to
    the site count. Returns ``(Psi, freqs, indices)``.
    """
    lam, V = eigh(fine.K, fine.M)
    f = np.sqrt(np.clip(lam, 0, None)) / (2 * np.pi)
    inside = (f >= f_lo) & (f <= f_hi)
    idx = np.flatnonzero(inside)
    expect = fine.n_sites if expect is None else expect
    if idx.size == 0:
        raise BandIsolationError(f"no modes in [{f_lo}, {f_hi}]")
    lo, hi = f[idx[0]], f[idx[-1]]
    below = f[: idx[0]]
    above = f[idx[-1] + 1 :]
    if (below.size and below[-1] > lo * (1 - ISOLATION)) or (above.size and above[0] < hi * (1 + ISOLATION)):
        raise BandIsolationError(f"band [{f_lo}, {f_hi}] is not isolated by {ISOLATION:.0%}")
    if idx.size != expect:
        raise ContractError(f"band holds {idx.size} modes, expected {expect}")
    return V[:, idx], f[idx], idx


@dataclass
class LocalizedBasis:
    Gamma: np.ndarray
    A: np.ndarray
    band: np.ndarray
    measure: np.ndarray


def _leading(H, tol=1e-10):
    w, U = np.linalg.eigh(H)
    top = w[-1]
    deg = np.flatnonzero(w >= top - tol * max(1.0, abs(top)))
    if deg.size == 1:
        return U[:, -1], False
    # deterministic choice inside the degenerate subspace: the vector closest to the lowest-index mode
    sub = U[:, deg]
    for i in range(H.shape[0]):
        v = sub @ sub[i]
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            return v / nv, True
    return sub[:, 0], True


def localize(Psi, projectors, band=None) -> LocalizedBasis:
    """Per site, the unit combination of band modes maximizing ``phi^T P_j phi``.

    ``projectors`` are boolean DOF masks (diagonal 0/1 projectors). The sign
    of each ``phi_j`` is fixed so its largest-magnitude entry is positive.
    """
    Psi = np.asarray(Psi, float)
    nb = Psi.shape[1]
    A = np.empty((len(projectors), nb))
    meas = np.empty(len(projectors))
    for j, P in enumerate(projectors):
        P = np.asarray(P)
        if P.dtype != bool:
            if not np.isin(P, (0, 1)).all():
                raise ContractError("projectors must be diagonal 0/1")
            P = P.astype(bool)
        Pp = Psi[P]
        a, degenerate = _leading(Pp.T @ Pp)
        if degenerate:
            warnings.warn(f"site {j}: leading localization eigenvalue is degenerate; tie broken by lowest index", RuntimeWarning, stacklevel=2)
        phi = Psi @ a
        if phi[np.argmax(np.abs(phi))] < 0:
            a = -a
        A[j] = a
        meas[j] = float(np.sum((Pp @ a) ** 2))
    Gamma = Psi @ A.T
    return LocalizedBasis(Gamma, A, np.arange(nb) if band is None else np.asarray(band), meas)


def reduce(fine: FineModel, Gamma, w_in=None, i_out=0) -> EffectiveModel:
    """Congruence reduction ``K = G^T K_f G``, ``M = G^T M_f G`` (undamped)."""
    Gamma = np.asarray(Gamma, float)
    m = Gamma.shape[1]
    if np.linalg.matrix_rank(Gamma) < m:
        raise ContractError("reduction basis is rank deficient")
    K = Gamma.T @ fine.K @ Gamma
    M = Gamma.T @ fine.M @ Gamma
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    w = np.ones(m) if w_in is None else w_in
    return EffectiveModel(M=M, K=K, B=np.zeros_like(M), w_in=w, i_out=i_out)


def pencil_frequencies(M, K):
    lam = eigh(K, M, eigvals_only=True)
    return np.sqrt(np.clip(lam, 0, None)) / (2 * np.pi)
