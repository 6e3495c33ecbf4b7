"""Component mode synthesis: Craig-Bampton and Rubin reduction, primal assembly and a grid benchmark."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, lu_factor, lu_solve, solve

from ..errors import ContractError, SingularityError
from .fine import FineModel, grid_membrane

RIGID_TOL = 1e-8


@dataclass
class ReducedComponent:
    """Reduced ``(M, K)`` with the ``n_boundary`` boundary DOFs first, then modal coordinates."""

    M: np.ndarray
    K: np.ndarray
    n_boundary: int
    T: np.ndarray
    method: str


def _split(n, boundary):
    b = np.asarray(boundary, int)
    if b.size and (b.min() < 0 or b.max() >= n or np.unique(b).size != b.size):
        raise ContractError("boundary indices must be unique and in range")
    i = np.setdiff1d(np.arange(n), b)
    return b, i


def craig_bampton(M, K, boundary, n_modes):
    """Fixed-interface reduction: ``T = [[I, 0], [-K_ii^-1 K_ib, Phi_fixed]]``."""
    n = M.shape[0]
    b, i = _split(n, boundary)
    if n_modes > i.size:
        raise ContractError(f"{n_modes} modes requested but only {i.size} interior DOFs")
    Kii = K[np.ix_(i, i)]
    # a floating interior (no boundary or insufficient support) makes K_ii singular
    if i.size and np.linalg.cond(Kii) > 1e12:
        raise SingularityError("interior stiffness is singular; the component floats without its boundary")
    lu = lu_factor(Kii)
    Psi = -lu_solve(lu, K[np.ix_(i, b)]) if b.size else np.zeros((i.size, 0))
    if n_modes:
        _, Phi = eigh(Kii, M[np.ix_(i, i)], subset_by_index=[0, n_modes - 1])
    else:
        Phi = np.zeros((i.size, 0))
    T = np.zeros((n, b.size + n_modes))
    T[b, : b.size] = np.eye(b.size)
    T[np.ix_(i, np.arange(b.size))] = Psi
    T[np.ix_(i, np.arange(b.size, b.size + n_modes))] = Phi
    return T


def deflated_flexibility(M, K, R):
    """Pseudo-inverse of ``K`` on the complement of the M-normalized rigid modes ``R``.

    The singular stiffness is regularized by adding ``M R R^T M`` and the
    result is projected with ``P = I - R R^T M`` on both sides.
    """
    n = M.shape[0]
    if R.shape[1] == 0:
        return np.linalg.inv(K)
    MR = M @ R
    Kreg = K + MR @ MR.T
    P = np.eye(n) - R @ MR.T
    return P @ solve(Kreg, P.T, assume_a="sym")


def rubin(M, K, boundary, n_modes):
    """Free-interface modes plus residual-flexibility attachment modes, re-coordinated on the boundary.

    ``x = Psi_a Psi_bb^-1 x_b + (Phi - Psi_a Psi_bb^-1 Phi_b) eta`` so the
    boundary rows of ``T`` are ``[I, 0]``.
    """
    n = M.shape[0]
    b, _ = _split(n, boundary)
    if n_modes > n - b.size:
        raise ContractError(f"{n_modes} modes requested but only {n - b.size} interior DOFs")
    if n_modes < 1:
        raise ContractError("rubin reduction needs at least one free-interface mode")
    # one extra eigenpair tells whether the retained set covers all rigid-body modes
    top = min(n_modes, n - 1)
    lam, Phi = eigh(K, M, subset_by_index=[0, top])
    scale = np.abs(np.diag(K)).max() / np.diag(M).max()
    rigid_all = lam < RIGID_TOL * scale
    if rigid_all.sum() > n_modes:
        raise ContractError(f"n_modes={n_modes} is below the {int(rigid_all.sum())} rigid-body modes")
    lam, Phi = lam[:n_modes], Phi[:, :n_modes]
    rigid = rigid_all[:n_modes]
    R = Phi[:, rigid]
    El, lam_e = Phi[:, ~rigid], lam[~rigid]
    G = deflated_flexibility(M, K, R) - (El / lam_e) @ El.T
    Psi_a = G[:, b]
    Psi_bb = Psi_a[b]
    try:
        W = np.linalg.solve(Psi_bb, np.eye(b.size))
    except np.linalg.LinAlgError:
        raise SingularityError("boundary residual flexibility is singular") from None
    A = Psi_a @ W
    T = np.hstack([A, Phi - A @ Phi[b]])
    T[b] = np.hstack([np.eye(b.size), np.zeros((b.size, n_modes))])
    return T


def component_reduce(M, K, boundary, n_modes, method="rubin") -> ReducedComponent:
    M = np.asarray(M, float)
    K = np.asarray(K, float)
    if method == "craig_bampton":
        T = craig_bampton(M, K, boundary, n_modes)
    elif method == "rubin":
        T = rubin(M, K, boundary, n_modes)
    else:
        raise ContractError(f"unknown reduction method {method!r}")
    Mr = T.T @ M @ T
    Kr = T.T @ K @ T
    return ReducedComponent(0.5 * (Mr + Mr.T), 0.5 * (Kr + Kr.T), len(boundary), T, method)


def assemble(components, dof_maps, n_global=None) -> FineModel:
    """Primal assembly: component DOF ``l`` of component ``c`` lands on global DOF ``dof_maps[c][l]``.

    Shared boundary DOFs carry the same global index in every component that
    contains them; their matrix contributions are summed.
    """
    if len(components) != len(dof_maps):
        raise ContractError("one DOF map per component required")
    maps = [np.asarray(m, int) for m in dof_maps]
    for (Mc, Kc), m in zip(components, maps):
        if np.shape(Mc) != (m.size, m.size) or np.shape(Kc) != (m.size, m.size):
            raise ContractError("DOF map length does not match the component size")
    n = int(max(m.max() for m in maps)) + 1 if n_global is None else n_global
    M = np.zeros((n, n))
    K = np.zeros((n, n))
    for (Mc, Kc), m in zip(components, maps):
        ix = np.ix_(m, m)
        M[ix] += Mc
        K[ix] += Kc
    return FineModel(M, K)


def assemble_reduced(reduced, boundary_globals, n_shared):
    """Assemble reduced components whose boundary DOFs map to ``boundary_globals[c]``.

    Modal coordinates get fresh global indices after the ``n_shared`` boundary DOFs.
    """
    maps = []
    nxt = n_shared
    for rc, bg in zip(reduced, boundary_globals):
        bg = np.asarray(bg, int)
        if bg.size != rc.n_boundary:
            raise ContractError("shared boundary lists must match the component boundary size")
        nm = rc.M.shape[0] - rc.n_boundary
        maps.append(np.concatenate([bg, np.arange(nxt, nxt + nm)]))
        nxt += nm
    return assemble([(rc.M, rc.K) for rc in reduced], maps, nxt)


# ---------------------------------------------------------------- benchmark


def partition_grid(nx=40, ny=40, split=None):
    """Split the free grid into four quadrants that share the node lines at ``split``.

    Springs and masses on shared lines are divided equally among the
    components that contain them, so assembling the unreduced components
    gives back the full model exactly. Returns ``(M, K, comps)`` where each
    component is ``(nodes, Mc, Kc, boundary_local)``.
    """
    sx, sy = split or (nx // 2, ny // 2)
    M, K, pairs = grid_membrane(nx, ny)
    xs, ys = np.arange(nx * ny) % nx, np.arange(nx * ny) // nx
    boxes = [(0, sx, 0, sy), (sx, nx - 1, 0, sy), (0, sx, sy, ny - 1), (sx, nx - 1, sy, ny - 1)]
    member = np.array([(xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1) for x0, x1, y0, y1 in boxes])
    node_share = member.sum(0)
    pair_share = (member[:, pairs[:, 0]] & member[:, pairs[:, 1]]).sum(0)
    comps = []
    for c in range(4):
        nodes = np.flatnonzero(member[c])
        loc = -np.ones(nx * ny, int)
        loc[nodes] = np.arange(nodes.size)
        Mc = np.diag(np.diag(M)[nodes] / node_share[nodes])
        Kc = np.zeros((nodes.size, nodes.size))
        sel = member[c, pairs[:, 0]] & member[c, pairs[:, 1]]
        for (a, b), s in zip(pairs[sel], pair_share[sel]):
            k = 1.0 / s
            la, lb = loc[a], loc[b]
            Kc[la, la] += k
            Kc[lb, lb] += k
            Kc[la, lb] -= k
            Kc[lb, la] -= k
        bnd = np.flatnonzero(node_share[nodes] > 1)
        comps.append((nodes, Mc, Kc, bnd))
    return M, K, comps


def elastic_frequencies(M, K, count):
    lam = eigh(K, M, eigvals_only=True, subset_by_index=[0, count + 5])
    scale = np.abs(np.diag(K)).max() / np.diag(M).max()
    lam = lam[lam > RIGID_TOL * scale]
    return np.sqrt(lam[:count]) / (2 * np.pi)


def substructure_benchmark(nx=40, ny=40, n_modes=20, n_compare=10):
    """Relative eigenfrequency errors of Rubin and Craig-Bampton on the first elastic modes.

    Returns ``(table_rows, csv_text)``; rows hold ``mode, f_full, err_rubin, err_cb``.
    """
    M, K, comps = partition_grid(nx, ny)
    f_full = elastic_frequencies(M, K, n_compare)
    shared = sorted({int(comps[c][0][b]) for c in range(4) for b in comps[c][3]})
    gidx = {g: i for i, g in enumerate(shared)}
    errs = {}
    for method in ("rubin", "craig_bampton"):
        red = [component_reduce(Mc, Kc, bnd, n_modes, method) for _, Mc, Kc, bnd in comps]
        bg = [[gidx[int(nodes[b])] for b in bnd] for nodes, _, _, bnd in comps]
        asm = assemble_reduced(red, bg, len(shared))
        f = elastic_frequencies(asm.M, asm.K, n_compare)
        errs[method] = np.abs(f - f_full) / f_full
    rows = [
        {"mode": i + 1, "f_full": float(f_full[i]), "err_rubin": float(errs["rubin"][i]), "err_craig_bampton": float(errs["craig_bampton"][i])}
        for i in range(n_compare)
    ]
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.10e}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows, buf.getvalue()
