import numpy as np
import pytest
from hypothesis import settings

import selfmpc  # noqa: F401  (64-bit JAX)
from selfmpc.config import reactor_scenario
from selfmpc.estimator import NoiseSpec
from selfmpc.model import LinearModel
from selfmpc.ocp import Bounds, CostData, Problem

settings.register_profile("selfmpc", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("selfmpc")


@pytest.fixture(scope="session")
def scenario():
    return reactor_scenario()


@pytest.fixture(scope="session")
def prob(scenario):
    return scenario.problem()


def linear_problem(M, Nmat, Q, R, P_N, W, V, C, lower=None, upper=None, tau=1e-3, N=20):
    """Problem with linear dynamics ``x+ = M x + N u`` and zero references."""
    nx, nu = M.shape[0], Nmat.shape[1]
    lower = np.full(nu, -np.inf) if lower is None else np.asarray(lower, float)
    upper = np.full(nu, np.inf) if upper is None else np.asarray(upper, float)
    return Problem(
        LinearModel(np.asarray(M, float), np.asarray(Nmat, float)),
        CostData(np.asarray(Q, float), np.asarray(R, float), np.asarray(P_N, float), np.zeros(nx), np.zeros(nu)),
        Bounds(lower, upper, tau),
        NoiseSpec(np.asarray(W, float), np.asarray(V, float), np.asarray(C, float)),
        N=N,
    )


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
