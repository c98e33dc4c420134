import csv

import numpy as np
import pytest

from selfmpc.estimator import NoiseSpec
from selfmpc.sim import (
    METRICS_COLUMNS,
    SimulationError,
    half_widths,
    make_rng,
    run_benchmark,
    run_closed_loop,
    sample_noise,
    write_metrics_csv,
)

NOISE = NoiseSpec(W=np.diag([0.0, 0.64, 0.0]), V=np.array([[2.5e-5]]), C=np.array([[1.0, 0.0, 0.0]]))


def test_half_widths_give_the_stated_variance():
    aw, av = half_widths(NOISE)
    np.testing.assert_allclose(aw, [0.0, np.sqrt(1.92), 0.0])
    np.testing.assert_allclose(av, [np.sqrt(7.5e-5)])
    rng = make_rng(1)
    draws = np.array([sample_noise(NOISE, rng)[0] for _ in range(20_000)])
    assert np.all(draws[:, [0, 2]] == 0.0)
    assert np.abs(draws[:, 1]).max() <= aw[1]
    assert draws[:, 1].var() == pytest.approx(0.64, rel=0.03)


def test_measurement_error_is_drawn_first():
    w, v = sample_noise(NOISE, make_rng(9))
    ref = make_rng(9)
    v_ref = ref.uniform(-1, 1, 1) * np.sqrt(7.5e-5)
    w_ref = ref.uniform(-1, 1, 3) * np.sqrt(3 * np.array([0.0, 0.64, 0.0]))
    np.testing.assert_array_equal(v, v_ref)
    np.testing.assert_array_equal(w, w_ref)


@pytest.fixture(scope="module")
def short_runs(scenario):
    sc = scenario.replace(M=12, seed=3)
    return sc, run_closed_loop(sc), run_closed_loop(sc), run_closed_loop(sc.replace(controller="certainty_equivalent"))


def test_same_seed_gives_identical_metrics(short_runs):
    _, a, b, _ = short_runs
    for name in ("x_true", "x_hat", "u", "eta", "sigma_diag", "cost", "phi_trace", "kkt_residual"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.avg_stage_cost == b.avg_stage_cost


def test_metrics_shapes_and_contents(short_runs):
    sc, a, _, ce = short_runs
    assert a.x_true.shape == (12, 3) and a.u.shape == (12, 3) and a.phi_trace.shape == (12, sc.N)
    assert len(a.timings) == 12
    assert np.all(np.isnan(ce.phi_trace)) and np.all(np.isfinite(a.phi_trace))
    assert a.avg_stage_cost == pytest.approx(a.cost.mean())
    assert np.all(a.kkt_residual <= 1e-8)
    np.testing.assert_array_equal(a.x_true[0], sc.y0)
    # both controllers see the same plant noise until their inputs differ
    assert a.eta[0] == ce.eta[0]


def test_metrics_csv_round_trips_exactly(short_runs, tmp_path):
    _, a, _, ce = short_runs
    path = tmp_path / "m.csv"
    write_metrics_csv(a, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# selfmpc metrics; rng=numpy.random.PCG64; seed=3;")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == METRICS_COLUMNS and len(rows) == 13
    got = np.array([[float(v) for v in r[1:4]] for r in rows[1:]])
    np.testing.assert_array_equal(got, a.x_true)
    assert float(rows[5][METRICS_COLUMNS.index("phi_trace")]) == np.sum(a.phi_trace[4])
    write_metrics_csv(ce, path)
    rows = list(csv.reader(path.read_text().splitlines()[1:]))
    assert rows[1][METRICS_COLUMNS.index("phi_trace")] == "nan"


def test_failure_keeps_partial_record(scenario, monkeypatch):
    import selfmpc.sim as sim
    from selfmpc.rti import PhaseError

    real = sim.controller_step
    calls = []

    def flaky(it, eta, prob, sr):
        calls.append(1)
        if len(calls) == 4:
            raise PhaseError("feedback", "forced")
        return real(it, eta, prob, sr)

    monkeypatch.setattr(sim, "controller_step", flaky)
    with pytest.raises(SimulationError) as ei:
        run_closed_loop(scenario.replace(M=10))
    assert ei.value.step == 3
    assert len(ei.value.partial.cost) == 3 and np.all(np.isfinite(ei.value.partial.cost))


def test_benchmark_rejects_few_reps(scenario):
    with pytest.raises(ValueError, match=">= 100"):
        run_benchmark(scenario, reps=50)


@pytest.mark.parametrize("kw", [dict(M=0), dict(N=1), dict(controller="bang_bang"), dict(y0=np.array([np.nan, 0, 0]))])
def test_invalid_scenarios(scenario, kw):
    with pytest.raises(ValueError):
        scenario.replace(**kw)
