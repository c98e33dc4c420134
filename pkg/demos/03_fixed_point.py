"""The fixed-point view of the self-reflective problem.

The map phi takes a control trajectory u, evaluates the gradient of E
at u and solves the problem perturbed by that gradient. Its fixed
points are the stationary points of the full objective. This script
measures how fast repeated application converges.

Run with ``python3 demos/03_fixed_point.py`` (about a minute).
"""

# %%
from dataclasses import replace

import numpy as np

import selfmpc  # noqa: F401
from selfmpc.cli import contraction_setup
from selfmpc.config import reactor_scenario
from selfmpc.reflect import build_preconditioner
from selfmpc.rti import contraction_study

sc = reactor_scenario()
prob = sc.problem()


def show(label, rep):
    print(f"{label}: residual at limit {rep.residual:.1e}, ratios",
          np.round(rep.ratios, 3))


# %% [markdown]
# With the noise scaled down a hundredfold the plain map contracts fast.

# %%
small = replace(prob, noise=replace(prob.noise, W=0.01 * np.asarray(prob.noise.W)))
u0, y, S = contraction_setup(small)
show("plain, W x 0.01", contraction_study(u0, y, S, small))

# %% [markdown]
# At the scenario's own noise level the plain map overshoots: u3 swings
# between the barrier floor and a large value, a two-cycle. Newton steps
# on u - phi(u) started from the cycle do not find the fixed point
# either; the large residual printed below says so, and the distances
# are then to the last iterate.

# %%
u0, y, S = contraction_setup(prob)
show("plain, W x 1", contraction_study(u0, y, S, prob, iters=5))

# %% [markdown]
# Adding the stage blocks of the Hessian of E as a proximal term damps
# the overshoot without moving the fixed point.

# %%
P = build_preconditioner(prob, sc.gamma, S0=S)
show("preconditioned, W x 1", contraction_study(u0, y, S, prob, iters=6, precond=P))
