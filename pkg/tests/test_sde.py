import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from tfilter.errors import DimensionMismatchError, DivergenceError
from tfilter.sde import (
    ContinuousObservationPath,
    DiscreteObservationModel,
    RngStream,
    SdeModel,
    benes_model,
    benes_transition_density,
    euler_maruyama_step,
    flow_sample,
    flow_sample_batch,
    generate_continuous_observation,
    generate_truth_and_observations,
    lorenz63_model,
    make_model,
    ou_model,
    read_observations_csv,
    simulate_path,
    write_observations_csv,
)


def _deterministic(drift, dim=1):
    return SdeModel("det", dim, drift, lambda X: np.zeros((X.shape[0], dim, dim)))


def test_euler_step_without_noise():
    m = _deterministic(lambda X: -X)
    assert euler_maruyama_step(m, [1.0], 0.01, 0)[0] == pytest.approx(0.99)


def test_euler_rejects_bad_dt_and_dimension():
    m = _deterministic(lambda X: -X)
    with pytest.raises(ValueError):
        euler_maruyama_step(m, [1.0], 0.0, 0)
    with pytest.raises(DimensionMismatchError):
        flow_sample_batch(m, np.zeros((3, 2)), 0.1, 1, 0)


def test_divergence_is_reported():
    m = _deterministic(lambda X: X**4)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
        flow_sample_batch(m, np.array([[1e100]]), 1.0, 1, 0)


def test_ou_euler_mean():
    m = ou_model(0.5)
    m_em = SdeModel("ou_em", 1, m.drift, m.diffusion)
    X = np.full((100_000, 1), 2.0)
    Y = flow_sample_batch(m_em, X, 0.1, 100, RngStream(3))
    se = Y.std() / np.sqrt(Y.size)
    assert abs(Y.mean() - 2.0 * np.exp(-0.05)) < 4 * se + 1e-4


def test_ou_variance_variants():
    A, b, S = ou_model(0.5).linear_step(0.1)
    assert A[0, 0] == pytest.approx(np.exp(-0.05))
    assert S[0, 0] == pytest.approx(np.exp(-0.1))
    _, _, S2 = ou_model(0.5, "exact").linear_step(0.1)
    assert S2[0, 0] == pytest.approx((1 - np.exp(-0.1)) / 1.0)


def test_rng_streams_are_reproducible():
    a = flow_sample(benes_model(), [0.3], 0.5, 1, RngStream(7).child(2))
    b = flow_sample(benes_model(), [0.3], 0.5, 1, RngStream(7).child(2))
    c = flow_sample(benes_model(), [0.3], 0.5, 1, RngStream(7).child(3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_benes_exact_step_symmetric_from_zero():
    Y = flow_sample_batch(benes_model(), np.zeros((200_000, 1)), 0.5, 1, 11)
    assert abs(Y.mean()) < 4 * Y.std() / np.sqrt(Y.size)


def test_benes_exact_step_matches_density():
    Y = flow_sample_batch(benes_model(), np.full((50_000, 1), 1.0), 0.5, 1, 4).ravel()
    edges = np.linspace(-2, 4, 31)
    counts = np.histogram(Y, edges)[0]
    probs = np.array(
        [integrate.quad(lambda x: benes_transition_density(1.0, x, 0.5), a, b)[0] for a, b in zip(edges[:-1], edges[1:])]
    )
    expected = probs / probs.sum() * counts.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.001


def test_benes_density_value_at_origin():
    assert benes_transition_density(0.0, 0.0, 1.0) == pytest.approx(np.exp(-0.5) / np.sqrt(2 * np.pi))


@pytest.mark.parametrize("dt", [0.1, 0.5, 1.0])
@pytest.mark.parametrize("x_prev", [-2.0, 0.0, 2.0])
def test_benes_density_integrates_to_one(dt, x_prev):
    val = integrate.quad(lambda x: benes_transition_density(x_prev, x, dt), -40, 40, points=[x_prev])[0]
    assert val == pytest.approx(1.0, abs=1e-8)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 2.0))
def test_benes_density_finite_positive(x_prev, x, dt):
    v = benes_transition_density(x_prev, x, dt)
    assert np.isfinite(v) and v >= 0


def test_lorenz_noiseless_stays_bounded():
    m = lorenz63_model(sigmas=(0.0, 0.0, 0.0))
    _, states = simulate_path(m, [1.0, 1.0, -10.0], 2000, 0.01, 0, substeps=10)
    assert np.all(np.isfinite(states)) and np.max(np.abs(states)) < 100


def test_lorenz_jacobian_matches_finite_differences():
    m = lorenz63_model()
    v = np.array([1.3, -2.0, 4.5])
    J = m.drift_jacobian(v)
    eps = 1e-6
    num = np.column_stack(
        [(m.drift((v + eps * e)[None])[0] - m.drift((v - eps * e)[None])[0]) / (2 * eps) for e in np.eye(3)]
    )
    assert np.allclose(J, num, atol=1e-6)


def test_make_model_unknown():
    with pytest.raises(ValueError):
        make_model("nope")


def test_tiny_noise_observations_are_exact():
    obs = DiscreteObservationModel.linear([[1.0]], [[1e-12]])
    _, states, Y = generate_truth_and_observations(ou_model(), obs, [0.5], 10, 0.1, 0)
    assert np.max(np.abs(Y - states[1:])) < 1e-5
    assert Y.shape == (10, 1) and states.shape == (11, 1)


def test_observation_covariance_validated():
    with pytest.raises(ValueError):
        DiscreteObservationModel.linear([[1.0]], [[-1.0]])
    with pytest.raises(ValueError):
        DiscreteObservationModel.linear([[1.0, 0.0]], [[1.0, 0.5], [0.4, 1.0]])


def test_noise_free_continuous_observation_is_riemann_sum():
    states = np.linspace(0, 1, 11)[:, None]
    path = generate_continuous_observation(lambda X: X**2, 0.0, states, 0.1, 0)
    expected = np.concatenate([[0.0], np.cumsum(states[:-1, 0] ** 2 * 0.1)])
    assert np.allclose(path.z_values[:, 0], expected)


def test_continuous_path_validation():
    with pytest.raises(ValueError):
        ContinuousObservationPath([0.0, 0.1], [[1.0], [2.0]], 1.0)
    with pytest.raises(ValueError):
        ContinuousObservationPath([0.0, 0.0], [[0.0], [2.0]], 1.0)


def test_observation_csv_roundtrip(tmp_path):
    obs = DiscreteObservationModel.linear([[1.0]], [[0.1]])
    t, X, Y = generate_truth_and_observations(benes_model(), obs, [0.0], 5, 0.5, 1)
    f = tmp_path / "o.csv"
    write_observations_csv(f, t, X, Y)
    back = read_observations_csv(f)
    assert np.array_equal(back["t"], t)
    assert np.array_equal(back["x"], X)
    assert np.array_equal(back["y"], Y)
    assert np.array_equal(back["y_rows"], np.arange(1, 6))
