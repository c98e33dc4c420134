"""Expected loss of an uncertain estimate and its four-sweep gradient.

Run with ``python3 demos/01_expected_loss_gradient.py``.
"""

# %%
import numpy as np

import selfmpc  # noqa: F401
from selfmpc.config import reactor_scenario
from selfmpc.ocp import interior_reference
from selfmpc.reflect import eval_E, fd_grad_E, four_sweep

sc = reactor_scenario()
prob = sc.problem()

# %% [markdown]
# The reactor scenario has three states and three controls. Only the
# first state is measured, and the process noise acts on the second.
# A control trajectory near the reference input, with a little dither:

# %%
rng = np.random.default_rng(0)
u = np.tile(interior_reference(prob.cost, prob.bounds), (prob.N, 1))
u += rng.uniform(0.0, 0.1, u.shape)
y = sc.y0
S = np.diag([0.0, 0.64, 0.0])

# %% [markdown]
# ``E`` is the expected increase of the optimal cost caused by the
# estimation error. It shrinks as u3 grows: feeding the third species
# is the only handle that makes x2 visible in the measurement.

# %%
print("E(u) =", eval_E(u, y, S, prob))
u_big = u.copy()
u_big[:, 2] += 1.0
print("E(u with more u3) =", eval_E(u_big, y, S, prob))

# %% [markdown]
# The gradient comes from two forward and two backward sweeps over the
# horizon; the finite-difference check costs 2 N n_u evaluations of E.

# %%
ws = four_sweep(u, y, S, prob)
fd = fd_grad_E(u, y, S, prob)
err = np.abs(ws.sigma - fd).max() / np.abs(fd).max()
print(f"relative error four sweeps vs finite differences: {err:.2e}")
print("sigma at stage 0:", ws.sigma[0])
print("trace of Phi per stage:", np.round(ws.phi_trace, 4))
