"""Expected loss of optimality and its gradient.

Forward state ``kappa_k = [x_k; vech(S_k)]`` (state and predicted
estimate variance), backward state ``omega_k = [lam_k; vech(P_k)]``
(co-state and cost-to-go curvature). ``vech`` stacks the upper triangle
row by row, each off-diagonal entry once. The expected loss is

    E(u, x0, S0) = sum_k 1/2 tr(Phi(x_k, u_k, Omega_{k+1}) S_k)

and its gradient is obtained with four sweeps: nominal forward (kappa),
nominal backward (omega), adjoint forward (a) and adjoint backward (b).
The adjoint sweeps only use vector-Jacobian products of the stage maps;
no stage Jacobian is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg

from selfmpc.estimator import propagate_covariance
from selfmpc.model import _hess, _taylor2, _third_contracted, jacobians
from selfmpc.ocp import Problem, barrier_derivs, interior_reference, solve_perturbed_ocp


class NotRegularError(RuntimeError):
    """``Y`` lost positive definiteness (far from a regular solution)."""

    def __init__(self, msg, stage=None, min_eig=None):
        super().__init__(msg if stage is None else f"stage {stage}: {msg}")
        self.stage = stage
        self.min_eig = min_eig


class Omega(NamedTuple):
    lam: np.ndarray
    P: np.ndarray


@dataclass
class SweepWorkspace:
    """Everything the four sweeps produce for one control trajectory.

    ``kappa`` and ``omega`` hold stages ``0..N``; ``a`` and ``b`` are the
    adjoint iterates ``a_0..a_N`` and ``b_0..b_N``; ``phi_trace`` is
    ``tr(Phi_k)`` per stage (diagnostic).
    """

    kappa: np.ndarray
    omega: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    E: float
    phi_trace: np.ndarray


@dataclass
class Preconditioner:
    Hmat: np.ndarray
    enabled: bool = True
    asymmetry: float = 0.0

    def blocks(self, n_u):
        """Diagonal ``n_u x n_u`` blocks, the part a stagewise QP can use."""
        N = self.Hmat.shape[0] // n_u
        return np.stack([self.Hmat[k * n_u:(k + 1) * n_u, k * n_u:(k + 1) * n_u] for k in range(N)])


# -- packing ---------------------------------------------------------------

def vech(S, xp=np):
    iu = np.triu_indices(S.shape[0])
    return S[iu]


def unvech(v, n, xp=np):
    iu = np.triu_indices(n)
    if xp is np:
        M = np.zeros((n, n), dtype=np.result_type(v, float))
        M[iu] = v
    else:
        M = xp.zeros((n, n), dtype=v.dtype).at[iu].set(v)
    return M + M.T - xp.diag(xp.diag(M))


def pack(vec, mat, xp=np):
    """``[vec; vech(mat)]`` -- used for both kappa and omega."""
    return xp.concatenate([vec, vech(mat, xp)])


def unpack(z, n, xp=np):
    return z[:n], unvech(z[n:], n, xp)


# -- stage functions (traceable) ------------------------------------------

def _sym(M):
    return 0.5 * (M + M.T)


def _xyz(model, cost, bounds, x, u, lam, P):
    A, B = jax.jacfwd(model.step, argnums=(0, 1))(x, u)
    hxx, hux, huu = _hess(model, x, u, lam)
    _, bar = barrier_derivs(u, bounds, jnp)
    X = B.T @ P @ A + hux
    Y = B.T @ P @ B + cost.R + jnp.diag(bar) + huu
    Z = A.T @ P @ A + cost.Q + hxx
    return A, X, _sym(Y), _sym(Z)


def _phi(X, Y):
    L = jnp.linalg.cholesky(Y)
    W = jax.scipy.linalg.solve_triangular(L, X, lower=True)
    return W.T @ W, jnp.min(jnp.diag(L))


class _Local(NamedTuple):
    """Second-order expansion of ``f`` at one stage.

    ``w`` is the expansion point ``[x; u]``; ``f``, ``J`` and ``H`` are the
    value, Jacobian and Hessian tensor of the RK4 map there. Stage maps
    built on it are exact to second order in ``(x, u)``; the one missing
    third-order term is supplied separately (see ``_four_sweep_impl``).
    """

    w: jax.Array
    f: jax.Array
    J: jax.Array
    H: jax.Array


def _expand(loc, x, u):
    d = jnp.concatenate([x, u]) - loc.w
    Hd = jnp.einsum("ijl,l->ij", loc.H, d)
    return loc.f + loc.J @ d + 0.5 * Hd @ d, loc.J + Hd


def _local_xyz(prob, loc, x, u, lam, P, hook):
    n = x.shape[0]
    c = prob.cost
    _, J = _expand(loc, x, u)
    A, B = J[:, :n], J[:, n:]
    # ``hook`` is zero; its cotangent is the weight of the third-order term
    hh = jnp.einsum("i,ijl->jl", lam, loc.H) + hook
    _, bar = barrier_derivs(u, prob.bounds, jnp)
    X = B.T @ P @ A + hh[n:, :n]
    Y = B.T @ P @ B + c.R + jnp.diag(bar) + hh[n:, n:]
    Z = A.T @ P @ A + c.Q + hh[:n, :n]
    return A, X, _sym(Y), _sym(Z)


def _calF(prob, loc, kap, u):
    n = prob.cost.Q.shape[0]
    x, S = unpack(kap, n, jnp)
    fx, J = _expand(loc, x, u)
    return pack(fx, propagate_covariance(J[:, :n], S, prob.noise, jnp), jnp)


def _calGL(prob, loc, kap, om1, u, hook):
    n = prob.cost.Q.shape[0]
    c = prob.cost
    x, S = unpack(kap, n, jnp)
    lam1, P1 = unpack(om1, n, jnp)
    A, X, Y, Z = _local_xyz(prob, loc, x, u, lam1, P1, hook)
    Phi, chol_min = _phi(X, Y)
    lam = A.T @ lam1 + c.Q @ (x - c.x_ref)
    om = pack(lam, _sym(Z - Phi), jnp)
    return om, 0.5 * jnp.sum(Phi * S), jnp.trace(Phi), chol_min


def _calM(prob, kap):
    c = prob.cost
    x = kap[: c.Q.shape[0]]
    return pack(c.P_N @ (x - c.x_ref), c.P_N, jnp)


def _expansions(prob, u, x0):
    """Roll out the trajectory and expand ``f`` at every stage (batched)."""
    def body(x, uk):
        xn = prob.model.step(x, uk)
        return xn, xn

    _, xs = jax.lax.scan(body, x0, u)
    xs = jnp.concatenate([x0[None], xs])
    f, J, H = jax.vmap(lambda x, uk: _taylor2(prob.model, x, uk))(xs[:-1], u)
    return xs, _Local(jnp.concatenate([xs[:-1], u], axis=1), f, J, H)


def _nominal_sweeps(prob, u, x0, S0):
    n = prob.cost.Q.shape[0]
    xs, loc = _expansions(prob, u, x0)
    hook0 = jnp.zeros((u.shape[0],) + loc.H.shape[2:])

    # sweep 1: kappa_{k+1} = F(kappa_k, u_k); the state part is taken from
    # the rollout so that every expansion is evaluated exactly at its point
    def fwd(S, inp):
        lk, xk, xn, uk = inp
        kap = pack(xk, S, jnp)
        _, Sn = unpack(_calF(prob, lk, kap, uk), n, jnp)
        return Sn, kap

    SN, kaps = jax.lax.scan(fwd, S0, (loc, xs[:-1], xs[1:], u))
    kapN = pack(xs[-1], SN, jnp)
    omN = _calM(prob, kapN)

    # sweep 2: omega_k = G(kappa_k, omega_{k+1}, u_k)
    def bwd(om1, inp):
        lk, kap, uk, hk = inp
        om, Lk, tr, cm = _calGL(prob, lk, kap, om1, uk, hk)
        return om, (om1, Lk, tr, cm)

    om0, (oms_next, Ls, trs, cms) = jax.lax.scan(bwd, omN, (loc, kaps, u, hook0), reverse=True)
    return loc, hook0, kaps, kapN, om0, oms_next, Ls, trs, cms


def _eval_E_raw(prob, u, x0, S0):
    *_, Ls, trs, cms = _nominal_sweeps(prob, u, x0, S0)
    return jnp.sum(Ls), cms


_eval_E = jax.jit(_eval_E_raw)
_eval_E_many = jax.jit(jax.vmap(_eval_E_raw, in_axes=(None, 0, None, None)))


def _four_sweep_impl(prob, u, x0, S0, drop_forward_adjoint=False):
    n = prob.cost.Q.shape[0]
    # sweeps 1 and 2
    loc, hook0, kaps, kapN, om0, oms_next, Ls, trs, cms = _nominal_sweeps(prob, u, x0, S0)

    # sweep 3: a_0 = 0, a_{k+1} = grad_w G a_k - grad_w L. The kappa and u
    # parts of the same product are kept for sweep 4, together with the
    # cotangent of the Hamiltonian Hessian.
    def afwd(a, inp):
        lk, kap, om1, uk, hk = inp
        _, vjp = jax.vjp(lambda kp, o, uu, h: _calGL(prob, lk, kp, o, uu, h)[:2], kap, om1, uk, hk)
        ck, co, cu, ch = vjp((a, -jnp.ones(())))
        if drop_forward_adjoint:
            co = jnp.zeros_like(co)
        return co, (a, ck, cu, ch)

    aN, (a_k, cks, cus, chs) = jax.lax.scan(afwd, jnp.zeros_like(om0), (loc, kaps, oms_next, u, hook0))

    # the Hamiltonian Hessian also moves with (x_k, u_k): add
    # grad_w <C_k, hess(lam_{k+1}^T f)> for all stages in one batch
    lams = oms_next[:, :n]
    third = jax.vmap(lambda x, uk, lam, C: _third_contracted(prob.model, x, uk, lam, _sym(C)))(
        kaps[:, :n], u, lams, chs)
    cks = cks.at[:, :n].add(third[:, :n])
    cus = cus + third[:, n:]

    # sweep 4: b_N = grad M a_N, b_k = grad_k G a_k + grad_k F b_{k+1} - grad_k L,
    # with the control gradient assembled on the way
    _, vjpM = jax.vjp(lambda kp: _calM(prob, kp), kapN)
    (bN,) = vjpM(aN)

    def abwd(b1, inp):
        lk, kap, uk, ck, cu = inp
        _, vjp = jax.vjp(lambda kp, uu: _calF(prob, lk, kp, uu), kap, uk)
        fk, fu = vjp(b1)
        return ck + fk, (b1, -cu - fu)

    b0, (b_next, sig) = jax.lax.scan(abwd, bN, (loc, kaps, u, cks, cus), reverse=True)

    kappa = jnp.concatenate([kaps, kapN[None]])
    omega = jnp.concatenate([om0[None], oms_next])
    a = jnp.concatenate([a_k, aN[None]])
    b = jnp.concatenate([b0[None], b_next])
    return sig, jnp.sum(Ls), trs, cms, kappa, omega, a, b


_four_sweep_jit = jax.jit(_four_sweep_impl, static_argnames=("drop_forward_adjoint",))


# -- public API ------------------------------------------------------------

def _f64(a):
    return jnp.asarray(a, dtype=jnp.float64)


def _check_regular(chol_min):
    cm = np.asarray(chol_min)
    if np.all(np.isfinite(cm)) and np.all(cm > 0):
        return
    bad = np.nonzero(~(np.isfinite(cm) & (cm > 0)))[0]
    k = int(bad.max())  # first failure met by the backward sweep
    raise NotRegularError("Y is not positive definite", stage=k)


def eval_xyz(x, u, om: Omega, c, b, p):
    """``X``, ``Y``, ``Z`` at one stage; ``om`` is ``Omega_{k+1}``."""
    _, X, Y, Z = _xyz_jit(p, c, b, _f64(x), _f64(u), _f64(om.lam), _f64(om.P))
    return np.asarray(X), np.asarray(Y), np.asarray(Z)


_xyz_jit = jax.jit(_xyz)


def eval_phi(X, Y) -> np.ndarray:
    """``X^T Y^{-1} X`` through a Cholesky factor of ``Y``."""
    try:
        L = np.linalg.cholesky(Y)
    except np.linalg.LinAlgError:
        lo = float(np.linalg.eigvalsh(0.5 * (Y + Y.T)).min())
        raise NotRegularError(f"Y is not positive definite (min eigenvalue {lo:.3e})", min_eig=lo)
    W = scipy.linalg.solve_triangular(L, X, lower=True)
    return W.T @ W


def terminal_M(x, c) -> Omega:
    return Omega(c.P_N @ (np.asarray(x) - c.x_ref), np.array(c.P_N, dtype=float))


def backward_G(x, u, om_next: Omega, c, b, p) -> Omega:
    """One step of the co-state / curvature recursion."""
    X, Y, Z = eval_xyz(x, u, om_next, c, b, p)
    A = jacobians(x, u, p).A
    Phi = eval_phi(X, Y)
    lam = A.T @ om_next.lam + c.Q @ (np.asarray(x) - c.x_ref)
    P = Z - Phi
    return Omega(lam, 0.5 * (P + P.T))


def eval_E(u, x0, S0, prob: Problem) -> float:
    """Expected loss of optimality along the trajectory driven by ``u``."""
    u, x0, S0 = _f64(u), _f64(x0), _f64(S0)
    E, cms = _eval_E(prob, u, x0, S0)
    _check_regular(cms)
    return float(E)


def four_sweep(u, x0, S0, prob: Problem, *, drop_forward_adjoint=False) -> SweepWorkspace:
    """Run all four sweeps; returns the full workspace.

    ``drop_forward_adjoint`` zeroes the adjoint forward sweep. It exists
    only so the gradient-check harness can prove it detects a broken sweep.
    """
    u, x0, S0 = _f64(u), _f64(x0), _f64(S0)
    sig, E, trs, cms, kappa, omega, a, b = _four_sweep_jit(
        prob, u, x0, S0, drop_forward_adjoint=drop_forward_adjoint
    )
    _check_regular(cms)
    return SweepWorkspace(
        kappa=np.asarray(kappa), omega=np.asarray(omega), a=np.asarray(a), b=np.asarray(b),
        sigma=np.asarray(sig), E=float(E), phi_trace=np.asarray(trs),
    )


def grad_E_four_sweep(u, x0, S0, prob: Problem) -> np.ndarray:
    """Gradient of :func:`eval_E` with respect to the controls, shape ``(N, n_u)``."""
    return four_sweep(u, x0, S0, prob).sigma


def fd_grad_E(u, x0, S0, prob: Problem, step=1e-5) -> np.ndarray:
    """Central finite differences of :func:`eval_E` (the reference oracle).

    All ``2 N n_u`` perturbed trajectories are evaluated in one batch.
    """
    u = np.array(u, dtype=float)
    eye = np.eye(u.size).reshape((u.size,) + u.shape)
    batch = np.concatenate([u + step * eye, u - step * eye])
    E, cms = _eval_E_many(prob, _f64(batch), _f64(x0), _f64(S0))
    _check_regular(np.min(np.asarray(cms), axis=0))
    E = np.asarray(E)
    return ((E[: u.size] - E[u.size:]) / (2 * step)).reshape(u.shape)


def steady_trajectory(prob: Problem, x_ss=None):
    """Nominal optimal trajectory starting at the reference state."""
    c = prob.cost
    x_ss = c.x_ref if x_ss is None else np.asarray(x_ss, dtype=float)
    u0 = np.tile(interior_reference(c, prob.bounds), (prob.N, 1))
    xs, us, _ = solve_perturbed_ocp(prob, x_ss, u0)
    return xs, us


def build_preconditioner(prob: Problem, gamma: float, *, u_ss=None, x_ss=None, S0=None, step=1e-6,
                         floor=1e-8) -> Preconditioner:
    """Hessian of ``E`` at the steady-state trajectory with ``S0 = gamma^2 I``.

    Central differences of the four-sweep gradient, symmetrized, with the
    eigenvalues floored at ``floor``. An explicit ``S0`` (for instance the
    converged filter variance) replaces ``gamma^2 I``.
    """
    if u_ss is None:
        xs, u_ss = steady_trajectory(prob, x_ss)
        x_ss = xs[0]
    u_ss = np.asarray(u_ss, dtype=float)
    S0 = gamma**2 * np.eye(prob.n_x) if S0 is None else np.asarray(S0, dtype=float)
    n = u_ss.size
    H = np.empty((n, n))
    for j, idx in enumerate(np.ndindex(u_ss.shape)):
        up, um = u_ss.copy(), u_ss.copy()
        up[idx] += step
        um[idx] -= step
        col = (grad_E_four_sweep(up, x_ss, S0, prob) - grad_E_four_sweep(um, x_ss, S0, prob)) / (2 * step)
        H[:, j] = col.ravel()
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite entries in the finite-difference Hessian")
    asym = float(np.max(np.abs(H - H.T)))
    Hs = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(Hs)
    Hs = (V * np.maximum(w, floor)) @ V.T
    return Preconditioner(0.5 * (Hs + Hs.T), True, asym)
