"""Tracking costs, the log barrier on the controls, and the problem bundle."""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import numpy as np

from selfmpc.estimator import NoiseSpec
from selfmpc.model import hessians_along, linearize, rollout
from selfmpc.qp import QpError, RiccatiSolver, StagewiseQp


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class CostData:
    Q: np.ndarray
    R: np.ndarray
    P_N: np.ndarray
    x_ref: np.ndarray
    u_ref: np.ndarray


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Bounds:
    """Control bounds; infinite entries carry no barrier term."""

    lower: np.ndarray
    upper: np.ndarray
    tau: float = 1e-3


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Problem:
    """Everything the controllers need except the current estimate."""

    model: object
    cost: CostData
    bounds: Bounds
    noise: NoiseSpec
    N: int = field(default=20, metadata=dict(static=True))

    @property
    def n_x(self):
        return np.shape(self.cost.Q)[0]

    @property
    def n_u(self):
        return np.shape(self.cost.R)[0]


def validate_cost(c: CostData):
    for name in ("Q", "R", "P_N"):
        M = np.asarray(getattr(c, name), dtype=float)
        if np.max(np.abs(M - M.T)) > 1e-12:
            raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(M).min() < -1e-12:
            raise ValueError(f"{name} must be positive semi-definite")


def validate_bounds(b: Bounds):
    lo, hi = np.asarray(b.lower, float), np.asarray(b.upper, float)
    if lo.shape != hi.shape:
        raise ValueError("lower and upper bounds differ in shape")
    if np.any(lo >= hi):
        raise ValueError("lower bound must be below upper bound in every component")
    if not b.tau > 0:
        raise ValueError(f"barrier parameter tau must be positive, got {b.tau}")


def stage_cost(x, u, c: CostData) -> float:
    """``l(x, u)``, the tracking cost without barrier."""
    dx = np.asarray(x) - c.x_ref
    du = np.asarray(u) - c.u_ref
    return 0.5 * float(dx @ c.Q @ dx + du @ c.R @ du)


def terminal_cost(x, c: CostData) -> float:
    dx = np.asarray(x) - c.x_ref
    return 0.5 * float(dx @ c.P_N @ dx)


def _gaps(u, b, xp):
    """Distances to the finite bounds; unit placeholders where infinite."""
    lo_fin = xp.isfinite(b.lower)
    hi_fin = xp.isfinite(b.upper)
    d_lo = xp.where(lo_fin, u - xp.where(lo_fin, b.lower, 0.0), 1.0)
    d_hi = xp.where(hi_fin, xp.where(hi_fin, b.upper, 0.0) - u, 1.0)
    return lo_fin, hi_fin, d_lo, d_hi


def barrier_cost(u, b: Bounds) -> float:
    """``-tau * sum log(gap)`` over finite bounds; ``inf`` outside the domain."""
    u = np.asarray(u, dtype=float)
    lo_fin, hi_fin, d_lo, d_hi = _gaps(u, b, np)
    if np.any(d_lo[lo_fin] <= 0) or np.any(d_hi[hi_fin] <= 0):
        return np.inf
    return -b.tau * float(np.sum(np.log(d_lo[lo_fin])) + np.sum(np.log(d_hi[hi_fin])))


def barrier_derivs(u, b: Bounds, xp=np):
    """Gradient and Hessian diagonal of the barrier term.

    Usable inside traced JAX code with ``xp=jax.numpy``.
    """
    lo_fin, hi_fin, d_lo, d_hi = _gaps(u, b, xp)
    grad = xp.where(lo_fin, -b.tau / d_lo, 0.0) + xp.where(hi_fin, b.tau / d_hi, 0.0)
    curv = xp.where(lo_fin, b.tau / d_lo**2, 0.0) + xp.where(hi_fin, b.tau / d_hi**2, 0.0)
    return grad, curv


def in_domain(u, b: Bounds) -> bool:
    u = np.asarray(u, dtype=float)
    return bool(np.all(u > b.lower) and np.all(u < b.upper))


def stage_cost_derivs(x, u, c: CostData, b: Bounds):
    """Exact gradient and Hessian blocks of ``l_tau = l + barrier``.

    Returns ``((gx, gu), (Hxx, Hux, Huu))``.
    """
    if not in_domain(u, b):
        raise ValueError(f"control {np.asarray(u)} outside the barrier domain")
    gbar, hbar = barrier_derivs(np.asarray(u, dtype=float), b)
    gx = c.Q @ (np.asarray(x) - c.x_ref)
    gu = c.R @ (np.asarray(u) - c.u_ref) + gbar
    Hux = np.zeros((len(c.u_ref), len(c.x_ref)))
    return (gx, gu), (np.array(c.Q, dtype=float), Hux, c.R + np.diag(hbar))


def stage_derivs_batch(xs, us, c: CostData, b: Bounds):
    """Vectorized :func:`stage_cost_derivs` over stacked stages.

    Returns ``gx (N, n_x)``, ``gu (N, n_u)`` and the ``Huu`` stack;
    ``Hxx = Q`` and ``Hux = 0`` at every stage.
    """
    gbar, hbar = barrier_derivs(us, b)
    gx = (xs - c.x_ref) @ c.Q.T
    gu = (us - c.u_ref) @ c.R.T + gbar
    Huu = c.R[None] + hbar[:, :, None] * np.eye(len(c.u_ref))[None]
    return gx, gu, Huu


def interior_reference(c: CostData, b: Bounds) -> np.ndarray:
    """Reference controls pushed strictly inside the barrier domain.

    Components closer than ``sqrt(tau / R_ii)`` to a finite bound are
    moved to exactly that distance, the minimizer of the scalar problem
    ``min R_ii d^2 / 2 - tau log d`` for a reference on the bound.
    """
    u = np.array(c.u_ref, dtype=float)
    diagR = np.diag(c.R)
    margin = np.sqrt(b.tau / np.where(diagR > 0, diagR, 1.0))
    lo_fin, hi_fin = np.isfinite(b.lower), np.isfinite(b.upper)
    u = np.where(lo_fin & (u - b.lower < margin), b.lower + margin, u)
    u = np.where(hi_fin & (b.upper - u < margin), b.upper - margin, u)
    return u


def keep_interior(u_old, u_new, b: Bounds, fraction=0.01):
    """Componentwise fraction-to-boundary safeguard.

    A full Newton step on the barrier problem may overshoot a finite
    bound; such components stop at ``fraction`` of their previous gap.
    Components within 1e-9 of a bound are nudged to bound + 1e-6.
    """
    u_old = np.asarray(u_old, dtype=float)
    u = np.array(u_new, dtype=float)
    lo_fin, hi_fin = np.isfinite(b.lower), np.isfinite(b.upper)
    lo = np.where(lo_fin, b.lower, 0.0)
    hi = np.where(hi_fin, b.upper, 0.0)
    u = np.where(lo_fin & (u - lo < fraction * (u_old - lo)), lo + fraction * (u_old - lo), u)
    u = np.where(hi_fin & (hi - u < fraction * (hi - u_old)), hi - fraction * (hi - u_old), u)
    u = np.where(lo_fin & (u - lo < 1e-9), lo + 1e-6, u)
    u = np.where(hi_fin & (hi - u < 1e-9), hi - 1e-6, u)
    return u


def assemble_qp(prob: Problem, xs, us, sigma=None, huu_extra=None, lams=None):
    """Second-order expansion of the barrier problem around ``(xs, us)``.

    ``sigma`` adds the linear perturbation to the control gradients,
    ``huu_extra`` (stack of ``n_u x n_u`` blocks) adds curvature to the
    control blocks. With ``lams`` (multipliers ``lam_0..lam_N``) the
    dynamics curvature ``lam_{k+1}^T f`` enters the Hessian (exact
    Newton); without it the expansion is Gauss-Newton.
    """
    c, b = prob.cost, prob.bounds
    N = len(us)
    fx, A, B = linearize(prob.model, xs[:-1], us)
    gx, gu, Huu = stage_derivs_batch(xs[:-1], us, c, b)
    Hxx = np.broadcast_to(c.Q, (N,) + c.Q.shape).copy()
    Hux = np.zeros((N, len(c.u_ref), len(c.x_ref)))
    if sigma is not None:
        gu = gu + sigma
    if huu_extra is not None:
        Huu = Huu + huu_extra
    if lams is not None:
        hxx, hux, huu = hessians_along(prob.model, xs[:-1], us, lams[1:])
        Hxx, Hux, Huu = Hxx + hxx, Hux + hux, Huu + huu
    return StagewiseQp(
        A=A, B=B, r=fx - xs[1:], gx=gx, gu=gu, Hxx=Hxx, Hux=Hux, Huu=Huu,
        HN=np.array(c.P_N, dtype=float), gN=c.P_N @ (xs[-1] - c.x_ref),
    )


def costate(qp: StagewiseQp):
    """Adjoint of a feasible trajectory: ``lam_k = gx_k + A_k^T lam_{k+1}``."""
    N = qp.N
    lam = np.empty((N + 1, qp.gN.shape[0]))
    lam[N] = qp.gN
    for k in range(N - 1, -1, -1):
        lam[k] = qp.gx[k] + qp.A[k].T @ lam[k + 1]
    return lam


def objective(prob: Problem, y, us, sigma=None, huu_extra=None, u_anchor=None, xs=None) -> float:
    """``sum l_tau + sigma^T u + m`` (plus the optional proximal term) by rollout."""
    c, b = prob.cost, prob.bounds
    if xs is None:
        xs = rollout(prob.model, y, us)
    total = terminal_cost(xs[-1], c)
    for k in range(len(us)):
        bar = barrier_cost(us[k], b)
        if not np.isfinite(bar):
            return np.inf
        total += stage_cost(xs[k], us[k], c) + bar
    if sigma is not None:
        total += float(np.sum(sigma * us))
    if huu_extra is not None:
        d = us - u_anchor
        total += 0.5 * float(np.einsum("ki,kij,kj->", d, huu_extra, d))
    return total


def _max_step(u, du, b: Bounds, fraction=0.99):
    """Largest ``alpha <= 1`` keeping ``u + alpha du`` strictly interior."""
    alpha = 1.0
    lo = np.broadcast_to(b.lower, u.shape)
    hi = np.broadcast_to(b.upper, u.shape)
    dec = (du < 0) & np.isfinite(lo)
    inc = (du > 0) & np.isfinite(hi)
    if np.any(dec):
        alpha = min(alpha, fraction * np.min((lo[dec] - u[dec]) / du[dec]))
    if np.any(inc):
        alpha = min(alpha, fraction * np.min((hi[inc] - u[inc]) / du[inc]))
    return alpha


class NotConvergedError(RuntimeError):
    pass


def solve_perturbed_ocp(prob: Problem, y, u_init, sigma=None, huu_extra=None, u_anchor=None,
                        tol=1e-10, max_iter=100, solver=None):
    """Minimize the barrier problem with linear perturbation ``sigma``.

    Newton iterations on the controls: each step solves the stagewise QP
    with the exact Lagrangian Hessian at the rolled-out trajectory (whose
    reduced Hessian is the exact Hessian in ``u``), then backtracks on the
    objective. Returns ``(xs, us, n_iter)`` once the reduced gradient is
    below ``tol`` in the infinity norm.
    """
    solver = solver or RiccatiSolver()
    us = np.array(u_init, dtype=float)
    y = np.asarray(y, dtype=float)
    xs = rollout(prob.model, y, us)
    N = len(us)
    for it in range(max_iter):
        qp = assemble_qp(prob, xs, us, sigma=sigma, huu_extra=huu_extra)
        if huu_extra is not None:
            qp.gu = qp.gu + np.einsum("kij,kj->ki", huu_extra, us - u_anchor)
        lam = costate(qp)
        grad = qp.gu + np.einsum("kji,kj->ki", qp.B, lam[1:])
        gnorm = np.abs(grad).max()
        if gnorm <= tol:
            return xs, us, it
        hxx, hux, huu = hessians_along(prob.model, xs[:-1], us, lam[1:])
        newton = StagewiseQp(
            A=qp.A, B=qp.B, r=np.zeros_like(qp.r), gx=qp.gx, gu=qp.gu,
            Hxx=qp.Hxx + hxx, Hux=qp.Hux + hux, Huu=qp.Huu + huu, HN=qp.HN, gN=qp.gN,
        )
        try:
            fac = solver.factorize(newton)
        except QpError:
            qp.r = np.zeros_like(qp.r)
            fac = solver.factorize(qp)
        du = solver.solve(fac, np.zeros(len(y))).du
        alpha = _max_step(us, du, prob.bounds)
        J0 = objective(prob, y, us, sigma, huu_extra, u_anchor, xs=xs)
        slope = float(np.sum(grad * du))
        # inside the quadratic region the predicted decrease drowns in the
        # rounding error of J, so the Armijo test would reject every step
        if alpha == 1.0 and (gnorm < 1e-6 or -slope <= 1e-11 * (1.0 + abs(J0))):
            us = us + du
            xs = rollout(prob.model, y, us)
            continue
        while alpha > 1e-12:
            trial = us + alpha * du
            Jt = objective(prob, y, trial, sigma, huu_extra, u_anchor)
            if Jt <= J0 + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
        us = us + alpha * du
        xs = rollout(prob.model, y, us)
    raise NotConvergedError(f"no convergence after {max_iter} Newton iterations (|grad| = {gnorm:.3e}, N = {N})")
