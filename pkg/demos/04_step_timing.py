"""Where the time of one real-time step goes.

Run with ``python3 demos/04_step_timing.py [reps]`` (default 300).
"""

# %%
import sys

import selfmpc  # noqa: F401
from selfmpc.config import reactor_scenario
from selfmpc.sim import run_benchmark

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
b = run_benchmark(reactor_scenario(), reps=reps)

# %% [markdown]
# Both controllers are timed from the same iterate and measurement. The
# only extra work of the self-reflective step is the gradient of E.

# %%
print(f"{'phase':<22}{'CE median us':>14}{'SR median us':>14}{'SR share %':>12}")
for ph, ce_med, _, sr_med, _, share in b.rows():
    print(f"{ph:<22}{ce_med:>14.1f}{sr_med:>14.1f}{share:>12.1f}")
print(f"SR/CE median step: {b.ratio:.2f}")
