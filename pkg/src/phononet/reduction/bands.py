"""Band-structure misfit used to balance coupling strength against band separation."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, DomainError

K_POINTS = np.array([0.0, np.pi / 3, 2 * np.pi / 3, np.pi])


def band_misfit(f7, f8, f9):
    """``(G, dw, w0, N)`` for three bands sampled at four equally spaced wavevectors (kHz).

    ``G = sum 1/(f8 - f7) + 1/(f9 - f8)``, ``dw = sum f8(k) cos k``,
    ``w0 = mean f8`` and ``N = -800 dw / w0 + G + G^2 / 64``.
    """
    f7, f8, f9 = (np.asarray(f, float) for f in (f7, f8, f9))
    if not (f7.shape == f8.shape == f9.shape == K_POINTS.shape):
        raise ContractError("each band needs exactly four samples")
    if not ((f7 < f8).all() and (f8 < f9).all()):
        raise DomainError("bands cross: need f7 < f8 < f9 at every wavevector")
    G = float(np.sum(1.0 / (f8 - f7) + 1.0 / (f9 - f8)))
    # cos(k) is rounded so that cos(pi/2 +- pi/6) contribute exact halves
    dw = float(np.sum(f8 * np.round(np.cos(K_POINTS), 15)))
    w0 = float(np.mean(f8))
    N = -800.0 * dw / w0 + G + G * G / 64.0
    return G, dw, w0, N
