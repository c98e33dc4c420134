"""Predicted-variance Riccati recursion and the extended Kalman filter."""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import numpy as np

from selfmpc.model import discrete_step, jacobians

PSD_TOL = 1e-8


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class NoiseSpec:
    """Second moments of process noise ``W`` and measurement noise ``V``.

    ``C`` is the ``(n_eta, n_x)`` output matrix. ``gamma`` is the support
    radius; it only documents the scenario scale and is never used in a
    computation.
    """

    W: np.ndarray
    V: np.ndarray
    C: np.ndarray
    gamma: float = field(default=1.0, metadata=dict(static=True))

    @property
    def n_eta(self):
        return np.shape(self.C)[0]


def symmetrize(S):
    return 0.5 * (S + S.T)


def check_psd(S, name="S", tol=PSD_TOL):
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > tol:
        raise ValueError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    lo = np.linalg.eigvalsh(symmetrize(S)).min() if S.size else 0.0
    if lo < -tol:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {lo:.3e})")


def innovation_term(S, C, V, xp=np):
    """``S C^T (C S C^T + V)^{-1} C S``, zero when the innovation is degenerate.

    A vanishing innovation covariance (``V = 0`` together with ``C S C^T = 0``)
    forces ``S C^T = 0`` for PSD ``S``; the unit substitute denominator then
    yields the exact zero term instead of ``0/0``. Works for numpy and
    jax.numpy alike.
    """
    SCt = S @ C.T
    Sinn = C @ SCt + V
    degenerate = xp.all(Sinn == 0)
    Sinn = xp.where(degenerate, xp.eye(Sinn.shape[0]), Sinn)
    return SCt @ xp.linalg.solve(Sinn, SCt.T)


def propagate_covariance(A, S, noise: NoiseSpec, xp=np):
    """``A [S - S C^T (C S C^T + V)^{-1} C S] A^T + W`` for a given ``A``."""
    post = S - innovation_term(S, noise.C, noise.V, xp)
    out = A @ post @ A.T + noise.W
    return 0.5 * (out + out.T)


def riccati_predict(x, u, S, n: NoiseSpec, p) -> np.ndarray:
    """One step of the predicted-variance recursion, ``A`` evaluated at ``(x, u)``."""
    S = np.asarray(S, dtype=float)
    check_psd(S)
    A = jacobians(x, u, p).A
    return propagate_covariance(A, S, n)


def kalman_gain(S, n: NoiseSpec):
    SCt = S @ np.asarray(n.C).T
    Sinn = np.asarray(n.C) @ SCt + np.asarray(n.V)
    if not np.any(Sinn):
        return np.zeros_like(SCt)
    return np.linalg.solve(Sinn, SCt.T).T


def measurement_update(xhat, S, eta, n: NoiseSpec) -> np.ndarray:
    """Correct a predicted estimate with the measurement ``eta``.

    ``S`` is the variance of the predicted estimate ``xhat``.
    """
    xhat = np.asarray(xhat, dtype=float)
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    C = np.asarray(n.C)
    if eta.shape != (C.shape[0],):
        raise ValueError(f"measurement has shape {eta.shape}, C expects ({C.shape[0]},)")
    K = kalman_gain(np.asarray(S, dtype=float), n)
    return xhat + K @ (eta - C @ xhat)


def ekf_update(xhat, S, u_applied, eta, n: NoiseSpec, p):
    """Measurement correction followed by prediction through ``f``.

    ``(xhat, S)`` is the predicted estimate of the current state and its
    variance, ``eta`` the measurement of that state and ``u_applied`` the
    input sent to the plant. Returns the predicted estimate of the next
    state and its variance. The variance equals
    ``riccati_predict(x_filtered, u_applied, S)`` where ``x_filtered`` is
    :func:`measurement_update` of the same data, so the controller's
    variance bookkeeping and the filter never drift apart.
    """
    S = np.asarray(S, dtype=float)
    check_psd(S)
    x_filt = measurement_update(xhat, S, eta, n)
    K = kalman_gain(S, n)
    S_filt = (np.eye(S.shape[0]) - K @ np.asarray(n.C)) @ S
    A = jacobians(x_filt, u_applied, p).A
    S_next = symmetrize(A @ S_filt @ A.T + np.asarray(n.W))
    return discrete_step(x_filt, u_applied, p), S_next
