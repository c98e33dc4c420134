"""Real-time certainty-equivalent and self-reflective MPC.

The package enables 64-bit floats in JAX on import; every kernel here
assumes double precision.
"""

import jax

jax.config.update("jax_enable_x64", True)

from selfmpc.model import (  # noqa: E402
    HessBlocks,
    LinearModel,
    LinModel,
    ModelParams,
    discrete_step,
    hamiltonian_hessian,
    jacobians,
    ode_rhs,
)
from selfmpc.estimator import (  # noqa: E402
    NoiseSpec,
    ekf_update,
    measurement_update,
    riccati_predict,
)
from selfmpc.ocp import Bounds, CostData, Problem  # noqa: E402
from selfmpc.qp import QpSolution, QpStage, RiccatiSolver, solve_stagewise_qp  # noqa: E402
from selfmpc.reflect import (  # noqa: E402
    Omega,
    Preconditioner,
    build_preconditioner,
    eval_E,
    four_sweep,
    grad_E_four_sweep,
)
from selfmpc.rti import (  # noqa: E402
    RtiIterate,
    StepTiming,
    ce_rti_step,
    fixed_point_map,
    initial_iterate,
    sr_rti_step,
)
from selfmpc.sim import Metrics, Scenario, run_benchmark, run_closed_loop  # noqa: E402
from selfmpc.config import load_scenario, reactor_scenario  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Bounds",
    "CostData",
    "HessBlocks",
    "LinModel",
    "LinearModel",
    "Metrics",
    "ModelParams",
    "NoiseSpec",
    "Omega",
    "Preconditioner",
    "Problem",
    "QpSolution",
    "QpStage",
    "RiccatiSolver",
    "RtiIterate",
    "Scenario",
    "StepTiming",
    "build_preconditioner",
    "ce_rti_step",
    "discrete_step",
    "ekf_update",
    "eval_E",
    "fixed_point_map",
    "four_sweep",
    "grad_E_four_sweep",
    "hamiltonian_hessian",
    "initial_iterate",
    "jacobians",
    "load_scenario",
    "measurement_update",
    "ode_rhs",
    "riccati_predict",
    "run_benchmark",
    "run_closed_loop",
    "solve_stagewise_qp",
    "sr_rti_step",
    "reactor_scenario",
]
