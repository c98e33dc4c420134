"""Reactor dynamics, its RK4 discretization and exact derivatives.

Every derivative returned here is a derivative of the *discrete* map
``f(x, u)`` (the RK4 integrator is differentiated), never of the exact
flow. Models are JAX pytrees exposing ``step(x, u)`` so that the same
object can be traced inside the jitted sweeps of :mod:`selfmpc.reflect`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ModelParams:
    """Three-species reactor with bilinear reaction terms.

    Feeds ``u`` enter every species directly; only the rate constants,
    dilution ``D`` and the sampling time ``h`` are numeric leaves, the
    RK4 substep count is static (changing it retraces jitted kernels).
    """

    k1: float = 0.5
    k2: float = 0.5
    k3: float = 0.1
    k4: float = 0.5
    k5: float = 0.1
    D: float = 0.1
    h: float = 0.5
    substeps: int = field(default=40, metadata=dict(static=True))

    n_x = 3
    n_u = 3

    def __post_init__(self):
        if not isinstance(self.h, (int, float)):
            return  # traced or unflattened leaves
        if self.h <= 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        rates = dict(k1=self.k1, k2=self.k2, k3=self.k3, k4=self.k4, k5=self.k5, D=self.D)
        for name, val in rates.items():
            if val < 0:
                raise ValueError(f"rate constant {name} must be >= 0, got {val}")

    def rhs(self, z, u):
        z1, z2, z3 = z[0], z[1], z[2]
        return jnp.stack([
            -(self.D + self.k1) * z1 - self.k2 * z2 * z3 + u[0],
            -self.D * z2 - self.k3 * z2 * z3 + self.k4 * z1 + u[1],
            -self.D * z3 - self.k5 * z2 * z3 + u[2],
        ])

    def step(self, x, u):
        hs = self.h / self.substeps

        def rk4(z, _):
            s1 = self.rhs(z, u)
            s2 = self.rhs(z + 0.5 * hs * s1, u)
            s3 = self.rhs(z + 0.5 * hs * s2, u)
            s4 = self.rhs(z + hs * s3, u)
            return z + (hs / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4), None

        z, _ = jax.lax.scan(rk4, x, None, length=self.substeps)
        return z

    def rhs_jet(self, z, u, mul):
        """``rhs`` on per-component jets; ``mul`` multiplies two jets."""
        z1, z2, z3 = z
        b = mul(z2, z3)
        return (
            tuple(-(self.D + self.k1) * a - self.k2 * c + e for a, c, e in zip(z1, b, u[0])),
            tuple(-self.D * a - self.k3 * c + self.k4 * d + e for a, c, d, e in zip(z2, b, z1, u[1])),
            tuple(-self.D * a - self.k5 * c + e for a, c, e in zip(z3, b, u[2])),
        )

    def step_jet(self, z, u, mul):
        """RK4 over one sampling interval on jets; mirrors :meth:`step`."""
        hs = self.h / self.substeps
        tmap = jax.tree_util.tree_map

        def rk4(z, _):
            s1 = self.rhs_jet(z, u, mul)
            s2 = self.rhs_jet(tmap(lambda a, b: a + 0.5 * hs * b, z, s1), u, mul)
            s3 = self.rhs_jet(tmap(lambda a, b: a + 0.5 * hs * b, z, s2), u, mul)
            s4 = self.rhs_jet(tmap(lambda a, b: a + hs * b, z, s3), u, mul)
            return tmap(lambda a, b, c, d, e: a + (hs / 6.0) * (b + 2.0 * c + 2.0 * d + e),
                        z, s1, s2, s3, s4), None

        z, _ = jax.lax.scan(rk4, z, None, length=self.substeps)
        return z


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class LinearModel:
    """Linear test dynamics ``x+ = M x + N u`` (used by the oracles)."""

    M: jax.Array
    N: jax.Array

    @property
    def n_x(self):
        return np.shape(self.M)[0]

    @property
    def n_u(self):
        return np.shape(self.N)[1]

    def step(self, x, u):
        return self.M @ x + self.N @ u


class LinModel(NamedTuple):
    A: np.ndarray
    B: np.ndarray


class HessBlocks(NamedTuple):
    """Second derivatives of ``lam^T f(x, u)``."""

    Fxx: np.ndarray
    Fux: np.ndarray
    Fuu: np.ndarray


def _sym(M):
    return 0.5 * (M + M.T)


# -- truncated Taylor arithmetic ------------------------------------------
#
# A scalar jet ``(c0, c1, c2)`` stands for ``c0 + c1 d + d^T c2 d`` in the
# direction ``d`` of ``w = [x; u]`` with ``c2`` symmetric. The optional
# fourth entry ``t`` carries the third-order part contracted with a fixed
# symmetric matrix ``C``: if the cubic coefficient is ``c3`` (symmetric),
# ``t_l = sum_ab C_ab c3_abl``. That is all the gradient of the expected
# loss needs from third derivatives, at the price of a second-order jet.


def _jet_mul2(a, b):
    a0, a1, a2 = a[:3]
    b0, b1, b2 = b[:3]
    outer = a1[:, None] * b1[None, :]
    return (a0 * b0, a0 * b1 + a1 * b0, a0 * b2 + a2 * b0 + 0.5 * (outer + outer.T))


def _jet_mul_contracted(C):
    def mul(a, b):
        a0, a1, a2, at = a
        b0, b1, b2, bt = b
        Ca1 = C @ a1
        Cb1 = C @ b1
        t = a0 * bt + at * b0 + (
            2.0 * (b2 @ Ca1 + a2 @ Cb1) + a1 * jnp.sum(C * b2) + b1 * jnp.sum(C * a2)
        ) / 3.0
        return _jet_mul2(a, b) + (t,)

    return mul


def _seed(v, offset, m, contracted):
    jets = []
    for i in range(v.shape[0]):
        jet = (v[i], jnp.zeros(m, v.dtype).at[offset + i].set(1.0), jnp.zeros((m, m), v.dtype))
        jets.append(jet + (jnp.zeros(m, v.dtype),) if contracted else jet)
    return tuple(jets)


def _run_jets(p, x, u, C=None):
    nx, m = x.shape[0], x.shape[0] + u.shape[0]
    contracted = C is not None
    mul = _jet_mul_contracted(C) if contracted else _jet_mul2
    z = p.step_jet(_seed(x, 0, m, contracted), _seed(u, nx, m, contracted), mul)
    return [jnp.stack([zi[k] for zi in z]) for k in range(len(z[0]))]


def _wrap(p, nx):
    def f(w):
        return p.step(w[:nx], w[nx:])

    return f


def _taylor2(p, x, u):
    """``(f, J, H)``: value, Jacobian ``[A B]`` and Hessian tensor over ``w``."""
    if hasattr(p, "step_jet"):
        c0, c1, c2 = _run_jets(p, x, u)
        return c0, c1, 2.0 * c2
    f = _wrap(p, x.shape[0])
    w = jnp.concatenate([x, u])
    return f(w), jax.jacfwd(f)(w), jax.jacfwd(jax.jacfwd(f))(w)


def _third_contracted(p, x, u, lam, C):
    """``grad_w <C, hess_w (lam^T f)>`` for symmetric ``C``."""
    if hasattr(p, "step_jet"):
        t = _run_jets(p, x, u, C)[3]
        return 6.0 * lam @ t
    f = _wrap(p, x.shape[0])

    def g(w):
        return jnp.sum(C * jax.hessian(lambda v: lam @ f(v))(w))

    return jax.grad(g)(jnp.concatenate([x, u]))


@jax.jit
def _ode_rhs(p, z, u):
    return p.rhs(z, u)


@jax.jit
def _step(p, x, u):
    return p.step(x, u)


def _jac(p, x, u):
    return jax.jacfwd(p.step, argnums=(0, 1))(x, u)


def _hess(p, x, u, lam):
    def lam_f(x, u):
        return lam @ p.step(x, u)

    (hxx, _), (hux, huu) = jax.jacfwd(jax.grad(lam_f, argnums=(0, 1)), argnums=(0, 1))(x, u)
    return _sym(hxx), hux, _sym(huu)


_jac_jit = jax.jit(_jac)
_hess_jit = jax.jit(_hess)


@jax.jit
def _linearize(p, xs, us):
    fx = jax.vmap(p.step)(xs, us)
    A, B = jax.vmap(lambda x, u: _jac(p, x, u))(xs, us)
    return fx, A, B


@jax.jit
def _hess_traj(p, xs, us, lams):
    return jax.vmap(lambda x, u, lam: _hess(p, x, u, lam))(xs, us, lams)


def _f64(a):
    return jnp.asarray(a, dtype=jnp.float64)


def ode_rhs(z, u, p: ModelParams) -> np.ndarray:
    """Continuous-time right-hand side of the reactor."""
    return np.asarray(_ode_rhs(p, _f64(z), _f64(u)))


def discrete_step(x, u, p) -> np.ndarray:
    """``f(x, u)``: classical RK4 over one sampling interval."""
    return np.asarray(_step(p, _f64(x), _f64(u)))


def jacobians(x, u, p) -> LinModel:
    A, B = _jac_jit(p, _f64(x), _f64(u))
    return LinModel(np.asarray(A), np.asarray(B))


def hamiltonian_hessian(x, u, lam, p) -> HessBlocks:
    """Blocks of the Hessian of ``lam^T f`` with respect to ``(x, u)``."""
    hxx, hux, huu = _hess_jit(p, _f64(x), _f64(u), _f64(lam))
    return HessBlocks(np.asarray(hxx), np.asarray(hux), np.asarray(huu))


def linearize(p, xs, us):
    """Evaluate ``f``, ``A`` and ``B`` at every stage of a trajectory.

    ``xs`` and ``us`` have shapes ``(N, n_x)`` and ``(N, n_u)``; the
    result is ``(f_values, A, B)`` stacked along the first axis.
    """
    fx, A, B = _linearize(p, _f64(xs), _f64(us))
    return np.asarray(fx), np.asarray(A), np.asarray(B)


def hessians_along(p, xs, us, lams):
    """Hamiltonian Hessian blocks for every stage, stacked."""
    hxx, hux, huu = _hess_traj(p, _f64(xs), _f64(us), _f64(lams))
    return np.asarray(hxx), np.asarray(hux), np.asarray(huu)


def taylor2(p, x, u):
    """Value, Jacobian ``[A B]`` and Hessian tensor of ``f`` over ``w = [x; u]``.

    For the reactor the coefficients are carried through the RK4 substeps
    in one pass of truncated Taylor arithmetic; other models fall back to
    nested forward-mode differentiation.
    """
    return tuple(np.asarray(a) for a in _taylor2_jit(p, _f64(x), _f64(u)))


def third_contracted(p, x, u, lam, C):
    """Gradient over ``w`` of ``<C, hess_w(lam^T f)>``, a third-derivative contraction."""
    C = 0.5 * (np.asarray(C, float) + np.asarray(C, float).T)
    return np.asarray(_third_jit(p, _f64(x), _f64(u), _f64(lam), _f64(C)))


_taylor2_jit = jax.jit(_taylor2)
_third_jit = jax.jit(_third_contracted)


def rollout(p, x0, us) -> np.ndarray:
    """Simulate ``x_{k+1} = f(x_k, u_k)``; returns ``N + 1`` states."""
    return np.asarray(_rollout(p, _f64(x0), _f64(us)))


@jax.jit
def _rollout(p, x0, us):
    def body(x, u):
        xn = p.step(x, u)
        return xn, xn

    _, xs = jax.lax.scan(body, x0, us)
    return jnp.concatenate([x0[None], xs])
