"""Logistic loss on log transmitted energy."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit

from .errors import DomainError


def loss(E, y, theta, scale=1.0, polarity=1.0):
    """Mean of ``log(1 + exp(-y * scale * polarity * (log E - theta)))``.

    Returns ``(L, dL/dE, dL/dtheta)``. Samples with ``E <= 0`` are excluded
    with a warning and get a zero gradient; if every sample is silent a
    DomainError is raised.
    """
    E = np.asarray(E, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = E > 0
    if not ok.all():
        if not ok.any():
            raise DomainError("all energies are nonpositive")
        warnings.warn(f"{int((~ok).sum())} silent samples excluded from the loss", RuntimeWarning, stacklevel=2)
    S = int(ok.sum())
    logE = np.log(np.where(ok, E, 1.0))
    z = y * scale * polarity * (logE - theta)
    per = np.where(ok, np.logaddexp(0.0, -z), 0.0)
    L = per.sum() / S
    # d softplus(-z)/dz = -sigmoid(-z)
    dz = np.where(ok, -expit(-z) / S, 0.0)
    dlogE = dz * y * scale * polarity
    dE = np.where(ok, dlogE / np.where(ok, E, 1.0), 0.0)
    dtheta = -dlogE.sum()
    return float(L), dE, float(dtheta)
