"""Closed-loop simulation with bounded uniform noise, metrics and timing harness."""

from __future__ import annotations

import copy
import csv
import gc
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from selfmpc.estimator import NoiseSpec
from selfmpc.model import ModelParams, discrete_step
from selfmpc.ocp import Bounds, CostData, Problem, stage_cost
from selfmpc.reflect import build_preconditioner
from selfmpc.rti import PhaseError, RtiIterate, StepTiming, controller_step, initial_iterate

CONTROLLERS = ("certainty_equivalent", "self_reflective")
RNG_NAME = "numpy.random.PCG64"
MIN_REPS = 100

METRICS_COLUMNS = (
    ["step"]
    + [f"x_true{i}" for i in (1, 2, 3)]
    + [f"x_hat{i}" for i in (1, 2, 3)]
    + [f"u{i}" for i in (1, 2, 3)]
    + ["eta"]
    + [f"sigma_diag{i}" for i in (1, 2, 3)]
    + ["cost", "phi_trace", "prepare_ns", "feedback_ns", "gradient_ns"]
)
TIMING_COLUMNS = ["phase", "ce_median_us", "ce_p95_us", "sr_median_us", "sr_p95_us", "sr_share_pct"]
TIMING_PHASES = ("perturbation_update", "qp_preparation", "feedback", "other", "total")


@dataclass(frozen=True)
class Scenario:
    model: ModelParams
    cost: CostData
    bounds: Bounds
    noise: NoiseSpec
    N: int
    M: int
    seed: int
    y0: np.ndarray
    S0: np.ndarray
    controller: str = "self_reflective"
    precondition: bool = False
    gamma: float = 0.1
    out_dir: str | None = None
    verbosity: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"closed-loop length M must be >= 1, got {self.M}")
        if self.N < 2:
            raise ValueError(f"horizon N must be >= 2, got {self.N}")
        if not np.all(np.isfinite(self.y0)):
            raise ValueError("y0 must be finite")
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")

    def problem(self) -> Problem:
        return Problem(self.model, self.cost, self.bounds, self.noise, N=self.N)

    def replace(self, **kw) -> Scenario:
        return replace(self, **kw)

    @property
    def self_reflective(self) -> bool:
        return self.controller == "self_reflective"


@dataclass
class Metrics:
    """Closed-loop record; every per-step array has length ``M``.

    ``phi_trace`` holds ``tr(Phi_k)`` for every stage of the step's gradient
    evaluation (NaN rows for the certainty-equivalent controller);
    ``kkt_residual`` is the residual of each feedback solve.
    """

    avg_stage_cost: float
    x_true: np.ndarray
    x_hat: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    sigma_diag: np.ndarray
    cost: np.ndarray
    phi_trace: np.ndarray
    kkt_residual: np.ndarray
    timings: list = field(default_factory=list)
    seed: int = 0
    controller: str = ""

    def estimation_error(self, start=100) -> float:
        """Time-averaged ``|x_true - x_hat|_2`` from step ``start`` on."""
        err = np.linalg.norm(self.x_true[start:] - self.x_hat[start:], axis=1)
        return float(err.mean()) if len(err) else float("nan")


class SimulationError(RuntimeError):
    """Controller failure during a closed-loop run; carries the partial record."""

    def __init__(self, step, cause, partial: Metrics):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.partial = partial


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def half_widths(noise: NoiseSpec):
    """Uniform half-widths ``sqrt(3 * variance)`` for process and measurement noise."""
    return np.sqrt(3.0 * np.diag(noise.W)), np.sqrt(3.0 * np.diag(noise.V))


def sample_noise(noise: NoiseSpec, rng: np.random.Generator):
    """Draw ``(w, v)``; component ``i`` is uniform on ``[-a_i, a_i]``.

    The measurement error is drawn first. Zero-variance components are
    exactly zero.
    """
    aw, av = half_widths(noise)
    v = rng.uniform(-1.0, 1.0, size=av.shape) * av
    w = rng.uniform(-1.0, 1.0, size=aw.shape) * aw
    if np.any(np.abs(w) > aw) or np.any(np.abs(v) > av):
        raise AssertionError("noise sample outside its support")
    return w, v


def _preconditioner(sc: Scenario, prob: Problem):
    if not sc.precondition:
        return None
    return build_preconditioner(prob, sc.gamma)


def _record(M, n_x, n_u, n_eta, N):
    return dict(
        x_true=np.full((M, n_x), np.nan), x_hat=np.full((M, n_x), np.nan),
        u=np.full((M, n_u), np.nan), eta=np.full((M, n_eta), np.nan),
        sigma_diag=np.full((M, n_x), np.nan), cost=np.full(M, np.nan),
        phi_trace=np.full((M, N), np.nan), kkt_residual=np.full(M, np.nan),
    )


def _metrics(rec, timings, sc, upto):
    cost = rec["cost"][:upto]
    avg = float(cost.mean()) if upto else float("nan")
    trimmed = {k: v[:upto] for k, v in rec.items()}
    return Metrics(avg_stage_cost=avg, timings=list(timings), seed=sc.seed, controller=sc.controller,
                   **trimmed)


def run_closed_loop(sc: Scenario, precond=None, progress=None) -> Metrics:
    """Simulate ``M`` steps of plant, measurement and controller.

    Per step: measure ``eta = C x_true + v``, let the controller produce
    ``u``, advance ``x_true <- f(x_true, u) + w``. The average stage cost
    uses the tracking cost ``l`` without barrier.
    """
    prob = sc.problem()
    if precond is None:
        precond = _preconditioner(sc, prob)
    rng = make_rng(sc.seed)
    it = initial_iterate(prob, sc.y0, sc.S0, precond)
    x_true = np.array(sc.y0, dtype=float)
    C = np.asarray(sc.noise.C)
    rec = _record(sc.M, prob.n_x, prob.n_u, C.shape[0], sc.N)
    timings = []
    for i in range(sc.M):
        w, v = sample_noise(sc.noise, rng)
        eta = C @ x_true + v
        rec["sigma_diag"][i] = np.diag(it.S_hat)
        try:
            u, it, tm = controller_step(it, eta, prob, sc.self_reflective)
        except (PhaseError, RuntimeError, ValueError) as exc:
            raise SimulationError(i, exc, _metrics(rec, timings, sc, i)) from exc
        rec["x_true"][i] = x_true
        rec["x_hat"][i] = it.y_filtered
        rec["u"][i] = u
        rec["eta"][i] = eta
        rec["cost"][i] = stage_cost(x_true, u, sc.cost)
        rec["kkt_residual"][i] = it.last_solution.kkt_residual
        if it.phi_trace is not None:
            rec["phi_trace"][i] = it.phi_trace
        timings.append(tm)
        x_true = discrete_step(x_true, u, sc.model) + w
        if progress is not None:
            progress(i)
    return _metrics(rec, timings, sc, sc.M)


def _fmt(values):
    # shortest round-trip representation of each float
    return [repr(float(v)) for v in values]


def write_metrics_csv(m: Metrics, path):
    """One row per step; see docs/formats.md for the columns."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# selfmpc metrics; rng={RNG_NAME}; seed={m.seed}; controller={m.controller}\n")
        wr = csv.writer(fh)
        wr.writerow(METRICS_COLUMNS)
        for i in range(len(m.cost)):
            t = m.timings[i] if i < len(m.timings) else StepTiming()
            phi = m.phi_trace[i]
            wr.writerow(
                [i, *_fmt(m.x_true[i]), *_fmt(m.x_hat[i]), *_fmt(m.u[i]), *_fmt(m.eta[i][:1]),
                 *_fmt(m.sigma_diag[i]), *_fmt([m.cost[i]]),
                 *(_fmt([np.sum(phi)]) if np.all(np.isfinite(phi)) else ["nan"]),
                 t.prepare_ns, t.feedback_ns, t.gradient_ns]
            )


# -- benchmark -------------------------------------------------------------

@dataclass
class BenchmarkSummary:
    """Per-phase median and 95th percentile in microseconds, per controller."""

    ce: dict
    sr: dict
    reps: int

    @property
    def ratio(self) -> float:
        """Median SR step over median CE step."""
        return self.sr["total"][0] / self.ce["total"][0]

    @property
    def gradient_share(self) -> float:
        """Median perturbation update over median SR step."""
        return self.sr["perturbation_update"][0] / self.sr["total"][0]

    def rows(self):
        out = []
        for ph in TIMING_PHASES:
            share = 100.0 * self.sr[ph][0] / self.sr["total"][0]
            out.append([ph, *self.ce[ph], *self.sr[ph], share])
        return out


def _phase_stats(timings):
    arr = {
        "perturbation_update": [t.gradient_ns for t in timings],
        "qp_preparation": [t.prepare_ns for t in timings],
        "feedback": [t.feedback_ns for t in timings],
        "other": [t.other_ns for t in timings],
        "total": [t.total_ns for t in timings],
    }
    return {k: (float(np.median(v)) / 1e3, float(np.percentile(v, 95)) / 1e3) for k, v in arr.items()}


def run_benchmark(sc: Scenario, reps=1000, warmup=20, precond=None) -> BenchmarkSummary:
    """Time CE and SR steps from identical iterates and measurements.

    The closed loop is driven by the self-reflective controller; at every
    step a certainty-equivalent step is timed from a copy of the same
    iterate and discarded. Garbage collection is paused while timing.
    """
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    prob = sc.problem()
    if precond is None:
        precond = _preconditioner(sc, prob)
    rng = make_rng(sc.seed)
    it = initial_iterate(prob, sc.y0, sc.S0, precond)
    x_true = np.array(sc.y0, dtype=float)
    C = np.asarray(sc.noise.C)
    ce_t, sr_t = [], []
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + reps):
            w, v = sample_noise(sc.noise, rng)
            eta = C @ x_true + v
            shadow = copy.deepcopy(it)
            _, _, t_ce = controller_step(shadow, eta, prob, self_reflective=False)
            u, it, t_sr = controller_step(it, eta, prob, self_reflective=True)
            if i >= warmup:
                ce_t.append(t_ce)
                sr_t.append(t_sr)
            x_true = discrete_step(x_true, u, sc.model) + w
    finally:
        if was_enabled:
            gc.enable()
    return BenchmarkSummary(_phase_stats(ce_t), _phase_stats(sr_t), reps)


def write_timing_csv(s: BenchmarkSummary, path):
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TIMING_COLUMNS)
        for row in s.rows():
            wr.writerow([row[0]] + [f"{v:.3f}" for v in row[1:]])
