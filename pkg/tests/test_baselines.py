import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats
from scipy.special import ndtr

from tfilter.baselines import (
    GaussianBelief,
    ParticleEnsemble,
    acceptance_rejection_sample,
    benes_daum_oracle,
    benes_daum_states,
    benes_envelope,
    benes_initial_sampler,
    benes_transition_sampler,
    exkf_continuous,
    exkf_discrete,
    exkf_linear,
    kalman_oracle_ou,
    model_transition_sampler,
    multinomial_resample,
    sir_pf_run,
    systematic_resample,
)
from tfilter.errors import AcceptanceRejectionError
from tfilter.sde import (
    ContinuousObservationPath,
    DiscreteObservationModel,
    benes_transition_density,
    identity_model,
    ou_model,
)


def _chi2_pvalue(samples, pdf, lo, hi, bins=50):
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.histogram(samples, edges)[0]
    probs = np.array([integrate.quad(pdf, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    expected = probs / probs.sum() * counts.sum()
    return stats.chisquare(counts, expected).pvalue


# ------------------------------------------------------------------ particles


def test_ensemble_validation():
    with pytest.raises(ValueError):
        ParticleEnsemble(np.zeros((2, 1)), np.array([0.5, 0.6]))
    e = ParticleEnsemble.uniform(np.arange(4.0))
    assert e.m == 4 and e.ess == pytest.approx(4.0)


def test_degenerate_resample():
    e = ParticleEnsemble(np.arange(5.0)[:, None], np.array([0, 0, 1.0, 0, 0]))
    out = multinomial_resample(e, 0)
    assert np.all(out.positions == 2.0) and np.allclose(out.weights, 0.2)


def test_multinomial_multiplicity():
    e = ParticleEnsemble(np.array([[0.0], [1.0]]), np.array([0.9, 0.1]))
    big = ParticleEnsemble(np.repeat(e.positions, 5000, axis=0), np.repeat(e.weights / 5000, 5000))
    out = multinomial_resample(big, 1)
    n0 = int(np.sum(out.positions == 0.0))
    assert abs(n0 - 9000) <= 4 * np.sqrt(1e4 * 0.09)


def test_uniform_bootstrap_expected_multiplicity():
    e = ParticleEnsemble.uniform(np.arange(50.0))
    hits = np.zeros(50)
    for s in range(400):
        out = multinomial_resample(e, s)
        hits += np.bincount(out.positions[:, 0].astype(int), minlength=50)
    assert np.allclose(hits / 400, 1.0, atol=4 * np.sqrt(0.98 / 400))


@pytest.mark.parametrize("resampler", [multinomial_resample, systematic_resample])
def test_resampling_unbiased(resampler):
    gen = np.random.default_rng(9)
    X = gen.normal(size=(200, 1))
    w = gen.random(200) ** 2
    e = ParticleEnsemble(X, w / w.sum())
    f = lambda x: np.sin(3 * x[:, 0]) + x[:, 0] ** 2
    target = e.average(f)
    vals = np.array([resampler(e, s).average(f) for s in range(500)])
    assert abs(vals.mean() - target) <= 4 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_pf_flat_likelihood_is_pushforward():
    obs = DiscreteObservationModel(lambda X: np.zeros((X.shape[0], 1)), [[1.0]])
    init = lambda m, gen: np.linspace(0, 1, m)[:, None]
    shift = lambda X, gen: X + 1.0
    tr = sir_pf_run(shift, obs, [[0.0], [0.0]], 7, init, 3)
    last = tr.ensembles[-1]
    assert np.allclose(last.weights, 1 / 7)
    # resampled copies of pushed-forward initial points
    assert np.all(np.isin(np.round(last.positions[:, 0] - 2.0, 12), np.round(np.linspace(0, 1, 7), 12)))


def test_pf_ess_mode_skips_resampling():
    obs = DiscreteObservationModel(lambda X: np.zeros((X.shape[0], 1)), [[1.0]])
    init = lambda m, gen: gen.normal(size=(m, 1))
    tr = sir_pf_run(model_transition_sampler(identity_model(), 1.0), obs, [[0.0]] * 3, 20, init, 0, ess_threshold=0.5)
    assert tr.resampled == [False, False, False, False]


def test_pf_tracks_kalman_mean():
    obs = DiscreteObservationModel.linear([[1.0]], [[1.0]])
    Y = np.array([[1.5], [1.2], [0.8], [1.0]])
    init = lambda m, gen: 2.0 + np.sqrt(0.1) * gen.normal(size=(m, 1))
    tr = sir_pf_run(model_transition_sampler(ou_model(0.5), 0.1), obs, Y, 20000, init, 5)
    kal = kalman_oracle_ou(0.5, 0.1, np.exp(-0.1), 1.0, Y[:, 0], GaussianBelief([2.0], [[0.1]]))
    assert abs(tr.means[-1, 0] - kal.means[-1, 0]) < 0.05


# ------------------------------------------------------------ acceptance-rejection


def test_self_proposal_accepts_everything():
    pdf = stats.norm.pdf
    x = acceptance_rejection_sample(pdf, lambda n, g: g.normal(size=n), pdf, 1.0, 0, size=1000, batch=1000)
    assert x.size == 1000


def test_uniform_on_unit_interval_rate_one():
    one = lambda x: np.ones_like(x)
    draws = []
    sampler = lambda n, g: draws.append(n) or g.random(n)
    x = acceptance_rejection_sample(one, sampler, one, 1.0, 0, size=500, batch=500)
    assert x.size == 500 and sum(draws) == 500


def test_envelope_violation_detected():
    with pytest.raises(AcceptanceRejectionError):
        acceptance_rejection_sample(
            lambda x: 2 * stats.norm.pdf(x), lambda n, g: g.normal(size=n), stats.norm.pdf, 1.0, 0, size=10
        )


def test_low_rate_aborts():
    tiny = lambda x: 1e-6 * stats.norm.pdf(x)
    with pytest.raises(AcceptanceRejectionError, match="acceptance rate"):
        acceptance_rejection_sample(tiny, lambda n, g: g.normal(size=n), stats.norm.pdf, 1.0, 0, size=10, min_trials=10_000)


@pytest.mark.parametrize("dt", [0.1, 0.5])
def test_generic_ar_with_windowed_envelope(dt):
    x_prev, w = 0.0, 8.0
    hw = w * np.sqrt(dt)
    mass = ndtr(w) - ndtr(-w)
    target = lambda x: benes_transition_density(x_prev, x, dt)
    prop = lambda n, g: stats.truncnorm.rvs(-w, w, loc=x_prev, scale=np.sqrt(dt), size=n, random_state=g)
    q = lambda x: np.where(np.abs(x - x_prev) <= hw, stats.norm.pdf(x, x_prev, np.sqrt(dt)) / mass, 0.0)
    M = benes_envelope(x_prev, dt, hw)
    # window tail mass is below 1e-14 and ignored
    x = acceptance_rejection_sample(target, prop, q, M * (1 + 1e-12) / mass, 3, size=10_000)
    assert _chi2_pvalue(x, target, x_prev - 4 * np.sqrt(dt) - dt, x_prev + 4 * np.sqrt(dt) + dt) > 0.01


@pytest.mark.parametrize("dt", [0.1, 0.5])
@pytest.mark.parametrize("x_prev", [0.0, 1.5])
def test_vectorized_benes_sampler_chi_square(dt, x_prev):
    sample = benes_transition_sampler(dt)
    x = sample(np.full((10_000, 1), x_prev), np.random.default_rng(21))[:, 0]
    pdf = lambda u: benes_transition_density(x_prev, u, dt)
    lo, hi = x_prev - 4 * np.sqrt(dt) - dt, x_prev + 4 * np.sqrt(dt) + dt
    assert _chi2_pvalue(x, pdf, lo, hi) > 0.01


# ------------------------------------------------------------------- Kalman


def test_gaussian_belief_requires_symmetry():
    with pytest.raises(ValueError):
        GaussianBelief([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def _scalar_kalman(a, q, h, r, ys, m, P):
    out = []
    for y in ys:
        m, P = a * m, a * a * P + q
        k = P * h / (h * h * P + r)
        m, P = m + k * (y - h * m), (1 - k * h) * P
        out.append((m, P))
    return np.array(out)


def test_ekf_equals_kalman_on_ou():
    gen = np.random.default_rng(4)
    ys = gen.normal(1, 1, 30)
    lam, dt = 0.5, 0.1
    A, _, S = ou_model(lam).linear_step(dt)
    init = GaussianBelief([2.0], [[0.1]])
    ekf = exkf_linear(A, [0.0], S, [[1.0]], [[1.0]], ys, init)
    kal = kalman_oracle_ou(lam, dt, S[0, 0], 1.0, ys, init)
    hand = _scalar_kalman(np.exp(-lam * dt), S[0, 0], 1.0, 1.0, ys, 2.0, 0.1)
    assert np.max(np.abs(ekf.means[1:, 0] - kal.means[1:, 0])) < 1e-10
    assert np.max(np.abs(ekf.covs[1:, 0, 0] - kal.covs[1:, 0, 0])) < 1e-10
    assert np.allclose(kal.means[1:, 0], hand[:, 0], rtol=1e-13)


@given(st.integers(0, 10_000))
def test_ekf_linear_2d_matches_joseph_form(seed):
    gen = np.random.default_rng(seed)
    A = gen.normal(size=(2, 2)) * 0.5
    L = gen.normal(size=(2, 2))
    Q = L @ L.T + 0.1 * np.eye(2)
    H = gen.normal(size=(1, 2))
    R = np.array([[0.5]])
    ys = gen.normal(size=(5, 1))
    init = GaussianBelief(np.zeros(2), np.eye(2))
    tr = exkf_linear(A, np.zeros(2), Q, H, R, ys, init)
    m, C = np.zeros(2), np.eye(2)
    for y in ys:
        m, C = A @ m, A @ C @ A.T + Q
        S = H @ C @ H.T + R
        K = C @ H.T / S
        m = m + (K * (y - H @ m)).ravel()
        IKH = np.eye(2) - K @ H
        C = IKH @ C @ IKH.T + K @ R @ K.T
    assert np.allclose(tr.means[-1], m, atol=1e-10)
    assert np.allclose(tr.covs[-1], C, atol=1e-10)


def test_noiseless_covariance_contracts():
    init = GaussianBelief([1.0, -1.0], np.eye(2))
    tr = exkf_linear(np.eye(2), np.zeros(2), np.zeros((2, 2)), np.eye(2), 1e-2 * np.eye(2), np.zeros((6, 2)), init)
    traces = [np.trace(c) for c in tr.covs]
    assert np.all(np.diff(traces) < 0)


def test_kalman_limits():
    init = GaussianBelief([2.0], [[0.1]])
    prior_only = kalman_oracle_ou(0.5, 0.1, 0.3, np.inf, [np.nan, np.nan], init)
    a = np.exp(-0.05)
    assert prior_only.means[2, 0] == pytest.approx(a * a * 2.0)
    assert prior_only.covs[1, 0, 0] == pytest.approx(a * a * 0.1 + 0.3)
    vague = kalman_oracle_ou(0.5, 0.1, 0.3, 1e12, [5.0], init)
    assert vague.means[1, 0] == pytest.approx(a * 2.0, abs=1e-9)
    sharp = kalman_oracle_ou(0.5, 0.1, 0.3, 1e-12, [5.0], init)
    assert sharp.means[1, 0] == pytest.approx(5.0, abs=1e-9)


def test_continuous_ekf_without_observation_info_propagates_moments():
    lam = 0.7
    n, dt = 200, 0.01
    path = ContinuousObservationPath(np.arange(n + 1) * dt, np.zeros((n + 1, 1)), [[1.0]])
    tr = exkf_continuous(
        lambda X: -lam * X, lambda x: np.array([[-lam]]), [[1.0]],
        lambda X: np.zeros((X.shape[0], 1)), lambda x: np.zeros((1, 1)), path,
        GaussianBelief([1.0], [[0.5]]), dt,
    )
    # Euler recursion of the moment equations
    m, C = 1.0, 0.5
    for _ in range(n):
        m, C = m - lam * m * dt, C + (-2 * lam * C + 1.0) * dt
    assert tr.means[-1, 0] == pytest.approx(m, rel=1e-12)
    assert tr.covs[-1, 0, 0] == pytest.approx(C, rel=1e-12)
    assert tr.repairs == 0
    with pytest.raises(ValueError):
        exkf_continuous(lambda X: X, lambda x: np.eye(1), [[1.0]], lambda X: X, lambda x: np.eye(1), path,
                        GaussianBelief([1.0], [[0.5]]), 0.02)


def test_discrete_ekf_nonlinear_uses_jacobians():
    f = lambda x: np.sin(x)
    F = lambda x: np.diag(np.cos(x))
    tr = exkf_discrete(f, F, [[0.1]], lambda x: x, lambda x: np.eye(1), [[0.2]], [[0.3]], GaussianBelief([0.5], [[0.2]]))
    mp, Cp = np.sin(0.5), np.cos(0.5) ** 2 * 0.2 + 0.1
    k = Cp / (Cp + 0.2)
    assert tr.means[1, 0] == pytest.approx(mp + k * (0.3 - mp))
    assert tr.covs[1, 0, 0] == pytest.approx((1 - k) * Cp)


# --------------------------------------------------------------- Benes-Daum


def test_benes_daum_hand_recursion():
    s2, dt, m0, P0 = 1.0, 0.1, 0.0, 2.0
    ys = [0.4, -1.0, 2.0]
    st_ = benes_daum_states(ys, s2, dt, m0, P0)
    m, P = m0, P0
    for k, y in enumerate(ys, start=1):
        Pm = P + dt
        assert st_[k].P_prior == pytest.approx(Pm)
        assert st_[k].m_prior == pytest.approx(m)
        m = m + Pm / (Pm + s2) * (y - m)
        P = Pm * s2 / (Pm + s2)
        assert st_[k].m == pytest.approx(m) and st_[k].P == pytest.approx(P)
    # variance chain is data independent
    other = benes_daum_states([10.0, 10.0, 10.0], s2, dt, m0, P0)
    assert [s.P for s in other] == [s.P for s in st_]


def test_benes_daum_normalization():
    tr = benes_daum_oracle([0.5, 1.5, -0.3], 1.0, 0.1, 0.0, 2.0)
    x = np.linspace(-30, 30, 100_001)
    for k in range(4):
        assert integrate.trapezoid(tr.density(k, x), x) == pytest.approx(1.0, abs=1e-6)
        mean = integrate.trapezoid(x * tr.density(k, x), x)
        assert mean == pytest.approx(tr.mean(k), abs=1e-6)


def test_benes_daum_without_cosh_is_kalman():
    ys = [0.5, 1.5, -0.3]
    tr = benes_daum_oracle(ys, 1.0, 0.1, 0.3, 2.0, cosh_factor=False)
    hand = _scalar_kalman(1.0, 0.1, 1.0, 1.0, ys, 0.3, 2.0)
    assert np.allclose([tr.mean(k) for k in (1, 2, 3)], hand[:, 0])
    assert np.allclose([tr.states[k].P for k in (1, 2, 3)], hand[:, 1])


def test_benes_initial_sampler_matches_density():
    x = benes_initial_sampler(0.0, 2.0)(20_000, np.random.default_rng(1))[:, 0]
    pdf = lambda u: benes_daum_oracle([], 1.0, 0.1, 0.0, 2.0).density(0, u)
    assert _chi2_pvalue(x, pdf, -7, 7, bins=40) > 0.01
