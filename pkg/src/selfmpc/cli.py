"""Command-line front end.

Subcommands::

    selfmpc simulate        closed-loop runs, per-step CSV plus a summary CSV
    selfmpc benchmark       per-phase CPU time of CE and SR steps
    selfmpc check-gradient  four-sweep gradient against central differences
    selfmpc contraction     distances and ratios of the fixed-point iteration

Exit codes: 0 success, 2 configuration or usage error, 3 controller
failure at run time, 4 a verification tolerance was violated.
Without ``--config`` the bundled reactor scenario is used.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_TOLERANCE = 0, 2, 3, 4
GRADIENT_TOL = 1e-5
SUMMARY_COLUMNS = ["seed", "controller", "steps", "avg_stage_cost", "estimation_error", "rng", "metrics_file"]


class UsageError(ValueError):
    pass


def _seed_range(text):
    lo, sep, hi = text.partition("..")
    try:
        a, b = int(lo), int(hi if sep else lo)
    except ValueError:
        raise UsageError(f"--seeds expects 'a..b', got {text!r}") from None
    if a < 0 or b < a:
        raise UsageError(f"--seeds range must satisfy 0 <= a <= b, got {text!r}")
    return list(range(a, b + 1))


def _thread_cap():
    raw = os.environ.get("SELFMPC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SELFMPC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SELFMPC_THREADS must be a positive integer, got {raw!r}")
    return n


def _scenario(args):
    from selfmpc.config import load_scenario, reactor_scenario

    sc = load_scenario(args.config) if args.config else reactor_scenario()
    over = {}
    if getattr(args, "controller", None):
        over["controller"] = args.controller
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        if args.steps < 1:
            raise UsageError(f"--steps must be >= 1, got {args.steps}")
        over["M"] = args.steps
    if getattr(args, "precondition", None) is not None:
        over["precondition"] = args.precondition
    if getattr(args, "out_dir", None):
        over["out_dir"] = args.out_dir
    return sc.replace(**over) if over else sc


def _out_dir(sc):
    d = Path(sc.out_dir or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- simulate --------------------------------------------------------------

def cmd_simulate(args) -> int:
    from selfmpc.sim import RNG_NAME, SimulationError, _preconditioner, run_closed_loop, write_metrics_csv

    sc = _scenario(args)
    seeds = _seed_range(args.seeds) if args.seeds else [sc.seed]
    out = _out_dir(sc)
    precond = _preconditioner(sc, sc.problem())

    def one(seed):
        s = sc.replace(seed=seed)
        try:
            m = run_closed_loop(s, precond=precond)
        except SimulationError as exc:
            path = out / f"metrics_{s.controller}_seed{seed}.partial.csv"
            write_metrics_csv(exc.partial, path)
            return seed, None, exc, path
        path = out / f"metrics_{s.controller}_seed{seed}.csv"
        write_metrics_csv(m, path)
        return seed, m, None, path

    workers = min(len(seeds), _thread_cap())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]

    status = EXIT_OK
    summary = out / f"summary_{sc.controller}.csv"
    with summary.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for seed, m, err, path in results:
            if err is not None:
                print(f"seed {seed}: controller failure at {err}; partial record in {path}", file=sys.stderr)
                status = EXIT_RUNTIME
                continue
            est = m.estimation_error(min(100, sc.M - 1))
            wr.writerow([seed, sc.controller, sc.M, repr(m.avg_stage_cost), repr(est), RNG_NAME, path.name])
            print(f"seed {seed} controller {sc.controller} steps {sc.M} "
                  f"avg_stage_cost {m.avg_stage_cost:.6f} estimation_error {est:.6f}")
    costs = [r[1].avg_stage_cost for r in results if r[1] is not None]
    if len(costs) > 1:
        print(f"mean avg_stage_cost over {len(costs)} seeds: {np.mean(costs):.6f}")
    return status


# -- benchmark -------------------------------------------------------------

def cmd_benchmark(args) -> int:
    from selfmpc.sim import MIN_REPS, TIMING_COLUMNS, run_benchmark, write_timing_csv

    if args.reps < MIN_REPS:
        raise UsageError(f"--reps must be >= {MIN_REPS}, got {args.reps}")
    sc = _scenario(args)
    s = run_benchmark(sc, reps=args.reps)
    path = _out_dir(sc) / "timing.csv"
    write_timing_csv(s, path)
    print(f"{'phase':<22}" + "".join(f"{c:>14}" for c in TIMING_COLUMNS[1:]))
    for row in s.rows():
        print(f"{row[0]:<22}" + "".join(f"{v:14.1f}" for v in row[1:]))
    print(f"SR/CE median step ratio {s.ratio:.3f}; gradient share of SR step {100 * s.gradient_share:.1f}%")
    print(f"wrote {path}")
    return EXIT_OK


# -- check-gradient --------------------------------------------------------

def gradient_points(prob, y0, S0, seed, n_points=10):
    """Random interior control trajectories, initial states and variances."""
    from selfmpc.ocp import interior_reference

    rng = np.random.Generator(np.random.PCG64(seed))
    u_ref = interior_reference(prob.cost, prob.bounds)
    lo, hi = np.asarray(prob.bounds.lower, float), np.asarray(prob.bounds.upper, float)
    pts = []
    for _ in range(n_points):
        u = u_ref + rng.uniform(-0.1, 0.1, size=(prob.N, prob.n_u))
        # keep a margin of 1e-2 from every finite bound
        u = np.where(np.isfinite(lo), np.maximum(u, np.where(np.isfinite(lo), lo, 0.0) + 1e-2), u)
        u = np.where(np.isfinite(hi), np.minimum(u, np.where(np.isfinite(hi), hi, 0.0) - 1e-2), u)
        x0 = np.asarray(y0, float) + rng.uniform(-0.1, 0.1, size=prob.n_x)
        G = rng.standard_normal((prob.n_x, prob.n_x))
        S = np.asarray(S0, float) + np.asarray(prob.noise.W, float) + 1e-3 * G @ G.T
        pts.append((u, x0, S))
    return pts


def gradient_errors(prob, points, corrupt=False):
    """Per point: ``(relative error, worst stage)`` of four-sweep vs central differences."""
    from selfmpc.reflect import fd_grad_E, four_sweep

    out = []
    for u, x0, S in points:
        sig = four_sweep(u, x0, S, prob, drop_forward_adjoint=corrupt).sigma
        fd = fd_grad_E(u, x0, S, prob)
        diff = np.abs(sig - fd)
        scale = np.abs(fd).max()
        rel = float(diff.max() / scale) if scale > 0 else float(diff.max())
        out.append((rel, int(np.unravel_index(diff.argmax(), diff.shape)[0])))
    return out


def cmd_check_gradient(args) -> int:
    sc = _scenario(args)
    prob = sc.problem()
    errs = gradient_errors(prob, gradient_points(prob, sc.y0, sc.S0, sc.seed), corrupt=args.corrupt_sweep)
    for i, (rel, stage) in enumerate(errs):
        print(f"point {i}: relative error {rel:.3e} (worst stage {stage})")
    worst = max(range(len(errs)), key=lambda i: errs[i][0])
    rel, stage = errs[worst]
    if rel <= GRADIENT_TOL:
        print(f"PASS max relative error {rel:.3e} <= {GRADIENT_TOL:g}")
        return EXIT_OK
    print(f"FAIL max relative error {rel:.3e} > {GRADIENT_TOL:g} at point {worst}, worst stage {stage}")
    return EXIT_TOLERANCE


# -- contraction -----------------------------------------------------------

def contraction_setup(prob, seed=0, offset=0.05):
    """Start point for the fixed-point study: the nominal steady trajectory
    with a random interior offset, the reference state and the converged
    filter variance there."""
    from selfmpc.ocp import keep_interior
    from selfmpc.reflect import steady_trajectory
    from selfmpc.rti import steady_variance

    xs, us = steady_trajectory(prob)
    S = steady_variance(prob, xs[0], us[0])
    rng = np.random.Generator(np.random.PCG64(seed))
    u0 = keep_interior(us, us + rng.uniform(-offset, offset, size=us.shape), prob.bounds)
    return u0, xs[0], S


def cmd_contraction(args) -> int:
    from dataclasses import replace

    from selfmpc.reflect import build_preconditioner
    from selfmpc.rti import contraction_study

    sc = _scenario(args)
    prob = sc.problem()
    gating = args.noise_scale == 1.0
    if not gating:
        noise = replace(prob.noise, W=args.noise_scale * np.asarray(prob.noise.W))
        prob = replace(prob, noise=noise)
    u0, y, S = contraction_setup(prob, sc.seed)
    # curvature of E at the steady state, at the variance the study uses
    precond = build_preconditioner(prob, sc.gamma, S0=S) if sc.precondition else None
    rep = contraction_study(u0, y, S, prob, iters=args.iters, precond=precond)
    how = "Newton-polished" if rep.polished else "plain iteration"
    print(f"limit u* ({how}), |phi(u*) - u*| = {rep.residual:.2e}")
    if rep.residual > 1e-8:
        print("no fixed point located: distances are to the last iterate")
    for j, d in enumerate(rep.distances):
        ratio = f"  ratio {rep.ratios[j - 1]:.4f}" if j > 0 else ""
        print(f"iter {j}: distance {d:.3e}{ratio}")
    ok = bool(np.all(rep.ratios[1:] < 1.0)) and rep.residual <= 1e-8
    verdict = "PASS" if ok else "FAIL"
    print(f"{verdict} measured ratios after the first {'all < 1' if ok else 'not all < 1'}"
          + ("" if gating else f" (noise scale {args.noise_scale:g}, diagnostic only)"))
    if gating and not ok:
        return EXIT_TOLERANCE
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from selfmpc.sim import CONTROLLERS

    p = argparse.ArgumentParser(prog="selfmpc", description="Real-time certainty-equivalent and "
                                "self-reflective MPC on the reactor scenario.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="scenario JSON (default: bundled reactor scenario)")
        sp.add_argument("--controller", choices=CONTROLLERS)
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--precondition", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--out-dir", dest="out_dir")

    sim = sub.add_parser("simulate", help="closed-loop simulation")
    common(sim, seed=False)
    g = sim.add_mutually_exclusive_group()
    g.add_argument("--seed", type=int)
    g.add_argument("--seeds", help="inclusive range a..b, run on worker threads")
    sim.add_argument("--steps", type=int)
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("benchmark", help="per-phase timing of one real-time step")
    common(bench)
    bench.add_argument("--reps", type=int, default=1000)
    bench.set_defaults(func=cmd_benchmark)

    chk = sub.add_parser("check-gradient", help="four-sweep gradient vs central differences")
    common(chk)
    chk.add_argument("--corrupt-sweep", action="store_true", help=argparse.SUPPRESS)
    chk.set_defaults(func=cmd_check_gradient)

    con = sub.add_parser("contraction", help="fixed-point iteration distances and ratios")
    common(con)
    con.add_argument("--iters", type=int, default=5)
    con.add_argument("--noise-scale", type=float, default=1.0,
                     help="multiply W (stress probe; only scale 1 gates the exit code)")
    con.set_defaults(func=cmd_contraction)
    return p


def main(argv=None) -> int:
    import selfmpc  # noqa: F401  (enables 64-bit JAX)
    from selfmpc.config import ConfigError
    from selfmpc.reflect import NotRegularError
    from selfmpc.rti import PhaseError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhaseError, NotRegularError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
