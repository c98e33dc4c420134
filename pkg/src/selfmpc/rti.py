"""Real-time iterations for the certainty-equivalent and self-reflective controllers.

Both controllers share one step: a preparation phase that linearizes
around the current iterate and factorizes the stagewise QP, a feedback
phase that embeds the new estimate and does the forward substitution,
and bookkeeping (variance update, shift). The self-reflective step adds
the perturbation vector ``sigma`` to the control gradients; it is
computed during preparation, before the measurement arrives.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from selfmpc.estimator import measurement_update, riccati_predict
from selfmpc.model import discrete_step
from selfmpc.ocp import (
    Problem,
    assemble_qp,
    in_domain,
    interior_reference,
    keep_interior,
    solve_perturbed_ocp,
)
from selfmpc.qp import QpError, QpSolution, RiccatiSolver
from selfmpc.reflect import Preconditioner, four_sweep, grad_E_four_sweep

_now = time.perf_counter_ns


class PhaseError(RuntimeError):
    """A controller step failed; ``phase`` names where."""

    def __init__(self, phase, cause):
        super().__init__(f"{phase} phase failed: {cause}")
        self.phase = phase
        self.cause = cause


@dataclass
class StepTiming:
    """Wall-clock nanoseconds spent in each part of one step."""

    prepare_ns: int = 0
    feedback_ns: int = 0
    gradient_ns: int = 0
    other_ns: int = 0

    @property
    def total_ns(self) -> int:
        return self.prepare_ns + self.feedback_ns + self.gradient_ns + self.other_ns


@dataclass
class RtiIterate:
    """Working set of one controller instance (single-threaded).

    ``y`` and ``S_hat`` are the predicted estimate of the current plant
    state and its variance, i.e. before the current measurement is used.
    ``solver`` is the reusable QP workspace; its counters record how many
    factorizations and solves were done.
    """

    x_traj: np.ndarray
    u_traj: np.ndarray
    sigma: np.ndarray
    y: np.ndarray
    S_hat: np.ndarray
    precond: Preconditioner | None = None
    solver: RiccatiSolver = field(default_factory=RiccatiSolver)
    phi_trace: np.ndarray | None = None
    last_solution: QpSolution | None = None
    y_filtered: np.ndarray | None = None


def initial_iterate(prob: Problem, y0, S0, precond: Preconditioner | None = None) -> RtiIterate:
    """Constant trajectory ``x_k = y0``, ``u_k`` = interior-projected reference."""
    u0 = interior_reference(prob.cost, prob.bounds)
    y0 = np.asarray(y0, dtype=float)
    return RtiIterate(
        x_traj=np.tile(y0, (prob.N + 1, 1)),
        u_traj=np.tile(u0, (prob.N, 1)),
        sigma=np.zeros((prob.N, prob.n_u)),
        y=y0.copy(),
        S_hat=np.array(S0, dtype=float),
        precond=precond,
    )


def shift(x_traj, u_traj, bounds):
    """Drop stage 0 and duplicate the last state and control.

    Controls within 1e-9 of a finite bound are nudged to bound + 1e-6.
    """
    x = np.concatenate([x_traj[1:], x_traj[-1:]])
    u = np.concatenate([u_traj[1:], u_traj[-1:]])
    return x, keep_interior(u, u, bounds, fraction=0.0)


def _curvature(it: RtiIterate, n_u):
    if it.precond is None or not it.precond.enabled:
        return None
    return it.precond.blocks(n_u)


def _rti_core(it: RtiIterate, y_filt, prob: Problem, sigma, timing: StepTiming):
    """Preparation, feedback and bookkeeping shared by both controllers."""
    t0 = _now()
    try:
        if not np.all(np.isfinite(it.x_traj)) or not all(in_domain(uk, prob.bounds) for uk in it.u_traj):
            raise ValueError("iterate left the barrier domain")
        qp = assemble_qp(prob, it.x_traj, it.u_traj, sigma=sigma, huu_extra=_curvature(it, prob.n_u))
        fac = it.solver.factorize(qp)
    except (QpError, ValueError) as exc:
        raise PhaseError("preparation", exc) from exc
    t1 = _now()
    try:
        sol = it.solver.solve(fac, y_filt - it.x_traj[0])
    except QpError as exc:
        raise PhaseError("feedback", exc) from exc
    u_plus = keep_interior(it.u_traj, it.u_traj + sol.du, prob.bounds)
    u_apply = u_plus[0].copy()
    t2 = _now()

    x_plus = it.x_traj + sol.dx
    S_next = riccati_predict(y_filt, u_apply, it.S_hat, prob.noise, prob.model)
    y_next = discrete_step(y_filt, u_apply, prob.model)
    x_new, u_new = shift(x_plus, u_plus, prob.bounds)
    new = replace(it, x_traj=x_new, u_traj=u_new, y=y_next, S_hat=S_next, last_solution=sol,
                  y_filtered=y_filt)
    t3 = _now()
    timing.prepare_ns += t1 - t0
    timing.feedback_ns += t2 - t1
    timing.other_ns += t3 - t2
    return u_apply, new, timing


def ce_rti_step(it: RtiIterate, y_new, prob: Problem):
    """One certainty-equivalent real-time step.

    ``y_new`` is the estimate of the current state after the measurement
    update. Returns ``(u_apply, new_iterate, timing)``; exactly one QP is
    factorized and solved. The variance is carried along as
    ``S_hat <- F(y_new, u_apply, S_hat)`` so that the same iterate can feed
    an estimator.
    """
    timing = StepTiming()
    y_new = np.asarray(y_new, dtype=float)
    sigma = np.zeros_like(it.u_traj)
    u, new, timing = _rti_core(it, y_new, prob, sigma, timing)
    return u, replace(new, sigma=sigma, phi_trace=None), timing


def sr_rti_step(it: RtiIterate, eta_new, prob: Problem):
    """One self-reflective real-time step.

    1. ``sigma`` = gradient of the expected loss at the current iterate
       (preparation, before the measurement is used);
    2. measurement update of the estimate with ``eta_new``;
    3. one QP of the perturbed problem, 4. the first control is returned,
    5. shift, 6. variance update ``S_hat <- F(y, u_apply, S_hat)``.
    """
    timing = StepTiming()
    t0 = _now()
    try:
        ws = four_sweep(it.u_traj, it.x_traj[0], it.S_hat, prob)
    except RuntimeError as exc:
        raise PhaseError("gradient", exc) from exc
    t1 = _now()
    y_filt = measurement_update(it.y, it.S_hat, eta_new, prob.noise)
    t2 = _now()
    timing.gradient_ns = t1 - t0
    timing.other_ns = t2 - t1
    u, new, timing = _rti_core(it, y_filt, prob, ws.sigma, timing)
    return u, replace(new, sigma=ws.sigma, phi_trace=ws.phi_trace), timing


def controller_step(it: RtiIterate, eta_new, prob: Problem, self_reflective: bool):
    """Closed-loop step from a raw measurement, for either controller.

    The certainty-equivalent controller gets the same measurement update
    as the self-reflective one (timed as "other").
    """
    if self_reflective:
        return sr_rti_step(it, eta_new, prob)
    t0 = _now()
    y_filt = measurement_update(it.y, it.S_hat, eta_new, prob.noise)
    dt = _now() - t0
    u, new, timing = ce_rti_step(it, y_filt, prob)
    timing.other_ns += dt
    return u, new, timing


def fixed_point_map(u, y, S_hat, prob: Problem, precond: Preconditioner | None = None,
                    tol=1e-10, max_iter=100):
    """``phi(u)``: minimizer of the problem perturbed by ``sigma = grad E(u)``.

    Solved to stationarity ``tol`` by Newton iterations warm-started at
    ``u``. With a preconditioner, its diagonal blocks enter as a proximal
    term anchored at ``u``, which leaves fixed points unchanged.
    """
    u = np.asarray(u, dtype=float)
    if not all(in_domain(uk, prob.bounds) for uk in u):
        raise ValueError("fixed_point_map needs controls strictly inside the bounds")
    sigma = grad_E_four_sweep(u, y, S_hat, prob)
    extra = precond.blocks(prob.n_u) if precond is not None and precond.enabled else None
    _, v, _ = solve_perturbed_ocp(prob, y, u, sigma=sigma, huu_extra=extra, u_anchor=u,
                                  tol=tol, max_iter=max_iter)
    return v


@dataclass
class ContractionReport:
    """``distances[j] = |u_j - u*|_inf``; ``ratios[j] = distances[j+1] / distances[j]``.

    ``residual`` is ``|phi(u*) - u*|_inf``; ``polished`` tells whether the
    limit needed Newton steps on ``u - phi(u)`` after the plain iterations.
    A residual far above the tolerance means no limit was found.
    """

    iterates: list
    u_star: np.ndarray
    distances: np.ndarray
    ratios: np.ndarray
    residual: float = 0.0
    polished: bool = False


def fixed_point_newton(u, phi, tol=1e-10, max_iter=8, step=1e-6, project=None):
    """Solve ``u = phi(u)`` by Newton steps with a central-difference Jacobian.

    Finds the fixed point whether or not the plain iteration is attracted
    to it. ``project(u_old, u_new)`` keeps steps admissible. Returns
    ``(u, residual)``.
    """
    u = np.array(u, dtype=float)
    n = u.size
    r = phi(u) - u
    for _ in range(max_iter):
        if np.abs(r).max() <= tol:
            break
        J = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            e = e.reshape(u.shape)
            J[:, i] = ((phi(u + e) - phi(u - e)) / (2 * step)).ravel()
        du = np.linalg.solve(np.eye(n) - J, r.ravel()).reshape(u.shape)
        u = u + du if project is None else project(u, u + du)
        r = phi(u) - u
    return u, float(np.abs(r).max())


def contraction_study(u0, y, S_hat, prob: Problem, iters=5, precond=None, limit_tol=1e-10,
                      max_plain=60) -> ContractionReport:
    """Iterate ``u <- phi(u)`` and measure ratios of distances to the limit.

    The limit ``u*`` is the fixed point of ``phi``: the plain iteration runs
    up to ``max_plain`` maps and, if successive changes are still above
    ``limit_tol``, its last iterate is polished by :func:`fixed_point_newton`.
    """
    def phi(v):
        return fixed_point_map(v, y, S_hat, prob, precond)

    us = [np.asarray(u0, dtype=float)]
    while len(us) <= max(iters, max_plain):
        us.append(phi(us[-1]))
        if len(us) > iters + 1 and np.abs(us[-1] - us[-2]).max() <= limit_tol:
            break
    u_star, res = us[-1], float(np.abs(us[-1] - us[-2]).max())
    polished = res > limit_tol
    if polished:
        try:
            u_star, res = fixed_point_newton(us[-1], phi, tol=limit_tol,
                                             project=lambda a, b: keep_interior(a, b, prob.bounds))
        except (ValueError, RuntimeError, np.linalg.LinAlgError):
            # no fixed point located near the iterates; distances fall back
            # to the last iterate and the residual stays large
            u_star = us[-1]
    traj = us[: iters + 1]
    dist = np.array([np.abs(v - u_star).max() for v in traj])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dist[:-1] > 0, dist[1:] / dist[:-1], 0.0)
    return ContractionReport(traj, u_star, dist, ratios, res, polished)


def steady_variance(prob: Problem, x, u, S0=None, iters=2000, tol=1e-13):
    """Fixed point of ``S <- F(x, u, S)``: the variance of a converged filter."""
    S = np.zeros((prob.n_x, prob.n_x)) if S0 is None else np.array(S0, dtype=float)
    for _ in range(iters):
        Sn = riccati_predict(x, u, S, prob.noise, prob.model)
        if np.abs(Sn - S).max() <= tol:
            return Sn
        S = Sn
    return S
