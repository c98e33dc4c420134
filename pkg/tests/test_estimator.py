import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfmpc.estimator import (
    NoiseSpec,
    check_psd,
    ekf_update,
    innovation_term,
    kalman_gain,
    measurement_update,
    riccati_predict,
)
from selfmpc.model import ModelParams, discrete_step, jacobians

P = ModelParams()
TABLE = NoiseSpec(W=np.diag([0.0, 0.64, 0.0]), V=np.array([[2.5e-5]]), C=np.array([[1.0, 0.0, 0.0]]))


def _random_psd(rng, n, rank=None):
    G = rng.standard_normal((n, rank or n))
    return G @ G.T


def _random_point(rng):
    x = np.array([1.0, 5.0, 0.0]) + rng.uniform(-0.3, 0.3, 3)
    x[2] = abs(x[2])
    u = np.array([0.6, 0.0, 0.01]) + rng.uniform(0, 0.3, 3)
    return x, u


def test_ekf_variance_equals_riccati_predict_on_random_inputs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x, u = _random_point(rng)
        S = _random_psd(rng, 3)
        W = np.diag(rng.uniform(0, 1, 3))
        n = NoiseSpec(W=W, V=np.array([[rng.uniform(1e-4, 1.0)]]), C=TABLE.C)
        eta = rng.standard_normal(1)
        x_filt = measurement_update(x, S, eta, n)
        _, S_ekf = ekf_update(x, S, u, eta, n, P)
        worst = max(worst, np.abs(S_ekf - riccati_predict(x_filt, u, S, n, P)).max())
    assert worst <= 1e-10


def test_ekf_textbook_gain_and_mean():
    rng = np.random.default_rng(2)
    x, u = _random_point(rng)
    S = _random_psd(rng, 3)
    eta = np.array([1.1])
    K = S @ TABLE.C.T @ np.linalg.inv(TABLE.C @ S @ TABLE.C.T + TABLE.V)
    x_filt = x + K @ (eta - TABLE.C @ x)
    x_next, _ = ekf_update(x, S, u, eta, TABLE, P)
    np.testing.assert_allclose(x_next, discrete_step(x_filt, u, P), atol=1e-13)


def test_riccati_predict_preserves_psd_over_long_runs():
    # 10^4 steps along a wandering trajectory, A re-evaluated every step
    rng = np.random.default_rng(5)
    S = np.zeros((3, 3))
    x = np.array([1.0, 5.0, 0.0])
    lo = np.inf
    for _ in range(10_000):
        u = np.array([0.6, 0.0, 0.0]) + rng.uniform(0.0, 0.4, 3)
        S = riccati_predict(x, u, S, TABLE, P)
        x = discrete_step(x, u, P)
        lo = min(lo, np.linalg.eigvalsh(S).min())
    assert lo >= -1e-9
    assert np.all(np.isfinite(S))


@given(st.integers(0, 2**32 - 1))
def test_riccati_predict_psd_property(seed):
    rng = np.random.default_rng(seed)
    x, u = _random_point(rng)
    S = _random_psd(rng, 3, rank=rng.integers(1, 4))
    n = NoiseSpec(W=np.diag(rng.uniform(0, 1, 3)), V=np.array([[rng.uniform(0, 1)]]), C=TABLE.C)
    Sn = riccati_predict(x, u, S, n, P)
    np.testing.assert_allclose(Sn, Sn.T, atol=1e-14)
    assert np.linalg.eigvalsh(Sn).min() >= -1e-9


def test_zero_innovation_is_guarded():
    n = NoiseSpec(W=np.zeros((3, 3)), V=np.zeros((1, 1)), C=TABLE.C)
    S = np.zeros((3, 3))
    assert np.all(innovation_term(S, n.C, n.V) == 0)
    assert np.all(kalman_gain(S, n) == 0)
    x = np.array([1.0, 5.0, 0.0])
    assert np.array_equal(measurement_update(x, S, np.array([3.0]), n), x)


def test_measurement_shape_checked():
    with pytest.raises(ValueError, match="measurement has shape"):
        measurement_update(np.zeros(3), np.eye(3), np.zeros(2), TABLE)


@pytest.mark.parametrize("S,msg", [
    (np.array([[1.0, 0.5], [0.0, 1.0]]), "symmetric"),
    (np.diag([1.0, -1.0]), "positive semi-definite"),
    (np.zeros((2, 3)), "square"),
])
def test_check_psd_errors(S, msg):
    with pytest.raises(ValueError, match=msg):
        check_psd(S)


def test_perfect_measurement_removes_measured_variance():
    S = np.diag([2.0, 3.0, 4.0])
    n = NoiseSpec(W=np.zeros((3, 3)), V=np.zeros((1, 1)), C=TABLE.C)
    post = S - innovation_term(S, n.C, n.V)
    np.testing.assert_allclose(post, np.diag([0.0, 3.0, 4.0]), atol=1e-15)
