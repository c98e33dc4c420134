"""Stage-structured equality-constrained QP solved by a Riccati sweep.

The problem is::

    min  sum_k  1/2 [dx_k; du_k]^T H_k [dx_k; du_k] + g_k^T [dx_k; du_k]
         + 1/2 dx_N^T H_N dx_N + g_N^T dx_N
    s.t. dx_0 = dx0,  dx_{k+1} = A_k dx_k + B_k du_k + r_k

The backward factorization depends on the stage data only, so it can be
done before ``dx0`` is known; the forward substitution is the cheap
feedback part. Cost is O(N (n_x + n_u)^3).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

REG_EIG = 1e-10
REG_SHIFT = 1e-8


class QpError(RuntimeError):
    def __init__(self, msg, stage=None):
        super().__init__(msg if stage is None else f"stage {stage}: {msg}")
        self.stage = stage


class QpStage(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    r: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    Hxx: np.ndarray
    Hux: np.ndarray
    Huu: np.ndarray


@dataclass
class StagewiseQp:
    """Stage data stacked along the first axis (length N)."""

    A: np.ndarray
    B: np.ndarray
    r: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    Hxx: np.ndarray
    Hux: np.ndarray
    Huu: np.ndarray
    HN: np.ndarray
    gN: np.ndarray

    @property
    def N(self):
        return self.A.shape[0]

    @classmethod
    def from_stages(cls, stages, HN, gN):
        cols = {name: np.stack([getattr(s, name) for s in stages]) for name in QpStage._fields}
        return cls(**cols, HN=np.asarray(HN, float), gN=np.asarray(gN, float))

    def stage(self, k) -> QpStage:
        return QpStage(*(getattr(self, name)[k] for name in QpStage._fields))


@dataclass
class QpSolution:
    dx: np.ndarray
    du: np.ndarray
    lam: np.ndarray
    kkt_residual: float
    regularized: bool = False


@dataclass
class RiccatiFactor:
    qp: StagewiseQp
    P: np.ndarray
    p: np.ndarray
    K: np.ndarray
    kff: np.ndarray
    regularized: bool


class RiccatiSolver:
    """Reusable solver workspace with call counters.

    Not reentrant: one thread at a time.
    """

    def __init__(self):
        self.factorizations = 0
        self.solves = 0

    def factorize(self, qp: StagewiseQp) -> RiccatiFactor:
        self.factorizations += 1
        N = qp.N
        nx, nu = qp.B.shape[1], qp.B.shape[2]
        P = np.empty((N + 1, nx, nx))
        p = np.empty((N + 1, nx))
        K = np.empty((N, nu, nx))
        kff = np.empty((N, nu))
        P[N] = qp.HN
        p[N] = qp.gN
        regularized = False
        for k in range(N - 1, -1, -1):
            A, B = qp.A[k], qp.B[k]
            PA = P[k + 1] @ A
            PB = P[k + 1] @ B
            s = P[k + 1] @ qp.r[k] + p[k + 1]
            Quu = qp.Huu[k] + B.T @ PB
            Qux = qp.Hux[k] + B.T @ PA
            qu = qp.gu[k] + B.T @ s
            if not (np.all(np.isfinite(Quu)) and np.all(np.isfinite(Qux)) and np.all(np.isfinite(qu))):
                raise QpError("non-finite stage data", stage=k)
            try:
                np.linalg.cholesky(Quu)
            except np.linalg.LinAlgError:
                if np.linalg.eigvalsh(Quu).min() >= -REG_EIG:
                    Quu = Quu + REG_SHIFT * np.eye(nu)
                    regularized = True
                else:
                    lo = np.linalg.eigvalsh(Quu).min()
                    raise QpError(f"reduced Hessian not positive definite (min eigenvalue {lo:.3e})", stage=k)
            sol = np.linalg.solve(Quu, np.column_stack([Qux, qu]))
            K[k] = -sol[:, :nx]
            kff[k] = -sol[:, nx]
            Pk = qp.Hxx[k] + A.T @ PA + Qux.T @ K[k]
            P[k] = 0.5 * (Pk + Pk.T)
            p[k] = qp.gx[k] + A.T @ s + Qux.T @ kff[k]
        return RiccatiFactor(qp, P, p, K, kff, regularized)

    def solve(self, fac: RiccatiFactor, dx0) -> QpSolution:
        self.solves += 1
        qp = fac.qp
        N = qp.N
        nx, nu = qp.B.shape[1], qp.B.shape[2]
        dx = np.empty((N + 1, nx))
        du = np.empty((N, nu))
        dx[0] = dx0
        for k in range(N):
            du[k] = fac.K[k] @ dx[k] + fac.kff[k]
            dx[k + 1] = qp.A[k] @ dx[k] + qp.B[k] @ du[k] + qp.r[k]
        lam = np.einsum("kij,kj->ki", fac.P, dx) + fac.p
        if not np.all(np.isfinite(du)):
            bad = int(np.argmax(~np.all(np.isfinite(du), axis=1)))
            raise QpError("non-finite solution", stage=bad)
        res = kkt_residual(qp, dx0, dx, du, lam)
        return QpSolution(dx, du, lam, res, fac.regularized)


def kkt_residual(qp: StagewiseQp, dx0, dx, du, lam) -> float:
    """Infinity norm of stationarity and dynamics residuals.

    ``lam[k]`` multiplies the constraint that defines ``dx_k``.
    """
    st_x = (
        np.einsum("kij,kj->ki", qp.Hxx, dx[:-1])
        + np.einsum("kji,kj->ki", qp.Hux, du)
        + qp.gx
        - lam[:-1]
        + np.einsum("kji,kj->ki", qp.A, lam[1:])
    )
    st_u = (
        np.einsum("kij,kj->ki", qp.Hux, dx[:-1])
        + np.einsum("kij,kj->ki", qp.Huu, du)
        + qp.gu
        + np.einsum("kji,kj->ki", qp.B, lam[1:])
    )
    st_N = qp.HN @ dx[-1] + qp.gN - lam[-1]
    dyn = (
        np.einsum("kij,kj->ki", qp.A, dx[:-1])
        + np.einsum("kij,kj->ki", qp.B, du)
        + qp.r
        - dx[1:]
    )
    init = dx[0] - dx0
    return float(max(np.abs(a).max() for a in (st_x, st_u, st_N, dyn, init)))


def solve_stagewise_qp(qp: StagewiseQp, dx0, solver: RiccatiSolver | None = None) -> QpSolution:
    solver = solver or RiccatiSolver()
    return solver.solve(solver.factorize(qp), dx0)


def dense_kkt(qp: StagewiseQp, dx0):
    """Assemble the full KKT system; ordering ``[dx_0..dx_N, du_0..du_{N-1}]``.

    Returns ``(KKT matrix, rhs)`` with multipliers ordered ``lam_0..lam_N``.
    Used as a test oracle and for small problems only.
    """
    N = qp.N
    nx, nu = qp.B.shape[1], qp.B.shape[2]
    nz = (N + 1) * nx + N * nu
    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    E = np.zeros(((N + 1) * nx, nz))
    e = np.zeros((N + 1) * nx)

    def ix(k):
        return slice(k * nx, (k + 1) * nx)

    def iu(k):
        return slice((N + 1) * nx + k * nu, (N + 1) * nx + (k + 1) * nu)

    for k in range(N):
        H[ix(k), ix(k)] = qp.Hxx[k]
        H[iu(k), iu(k)] = qp.Huu[k]
        H[iu(k), ix(k)] = qp.Hux[k]
        H[ix(k), iu(k)] = qp.Hux[k].T
        g[ix(k)] = qp.gx[k]
        g[iu(k)] = qp.gu[k]
        # row block k+1: A dx_k + B du_k - dx_{k+1} = -r_k
        E[ix(k + 1), ix(k)] = qp.A[k]
        E[ix(k + 1), iu(k)] = qp.B[k]
        E[ix(k + 1), ix(k + 1)] = -np.eye(nx)
        e[ix(k + 1)] = -qp.r[k]
    H[ix(N), ix(N)] = qp.HN
    g[ix(N)] = qp.gN
    E[ix(0), ix(0)] = -np.eye(nx)
    e[ix(0)] = -np.asarray(dx0)
    kkt = np.block([[H, E.T], [E, np.zeros((E.shape[0], E.shape[0]))]])
    return kkt, np.concatenate([-g, e])
