"""Pinned output headers. Changing one of these is a breaking change."""

from pathlib import Path

from selfmpc.cli import SUMMARY_COLUMNS
from selfmpc.sim import METRICS_COLUMNS, TIMING_COLUMNS, TIMING_PHASES

DOC = (Path(__file__).parents[1] / "docs" / "formats.md").read_text()

METRICS = ("step,x_true1,x_true2,x_true3,x_hat1,x_hat2,x_hat3,u1,u2,u3,eta,"
           "sigma_diag1,sigma_diag2,sigma_diag3,cost,phi_trace,prepare_ns,feedback_ns,gradient_ns")
SUMMARY = "seed,controller,steps,avg_stage_cost,estimation_error,rng,metrics_file"
TIMING = "phase,ce_median_us,ce_p95_us,sr_median_us,sr_p95_us,sr_share_pct"


def test_metrics_header():
    assert ",".join(METRICS_COLUMNS) == METRICS
    assert METRICS in DOC


def test_summary_header():
    assert ",".join(SUMMARY_COLUMNS) == SUMMARY
    assert SUMMARY in DOC


def test_timing_header_and_rows():
    assert ",".join(TIMING_COLUMNS) == TIMING
    assert TIMING in DOC
    assert TIMING_PHASES == ("perturbation_update", "qp_preparation", "feedback", "other", "total")
    assert all(f"`{p}`" in DOC for p in TIMING_PHASES)
