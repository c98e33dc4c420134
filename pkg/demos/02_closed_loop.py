"""Certainty-equivalent versus self-reflective control of the reactor.

Run with ``python3 demos/02_closed_loop.py [steps]`` (default 300).
"""

# %%
import sys

import numpy as np

import selfmpc  # noqa: F401
from selfmpc.config import reactor_scenario
from selfmpc.sim import run_closed_loop

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
sc = reactor_scenario(M=steps, seed=0)

# %% [markdown]
# Both controllers see the same noise sequence: uniform, with the
# variances of the scenario file, measurement error drawn first.

# %%
ce = run_closed_loop(sc.replace(controller="certainty_equivalent"))
sr = run_closed_loop(sc)
for name, m in (("CE", ce), ("SR", sr)):
    print(f"{name}: average stage cost {m.avg_stage_cost:.3f}, "
          f"mean u3 {m.u[:, 2].mean():.4f}, estimation error {m.estimation_error(min(100, steps - 1)):.3f}")

# %% [markdown]
# The certainty-equivalent controller drives u3 to the barrier floor,
# which leaves x2 almost unobservable; its estimate of x2 drifts. The
# self-reflective controller spends some u3 to keep learning x2.
# With u3 near zero x2 is a first-order random walk with pole
# exp(-D h), so its stationary variance bounds the cost from below.

# %%
a = np.exp(-sc.model.D * sc.model.h)
var_x2 = sc.noise.W[1, 1] / (1 - a**2)
print(f"open-loop stationary variance of x2: {var_x2:.2f}")
print(f"x2 spread under CE: {ce.x_true[:, 1].std():.2f}, under SR: {sr.x_true[:, 1].std():.2f}")
