"""Comparison filters and exact oracles.

SIR particle filter, acceptance-rejection sampling, discrete and
continuous-time extended Kalman filters, the exact Kalman recursion for
the O-U model, and the closed-form Benes-Daum posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import log_ndtr

from .errors import AcceptanceRejectionError, NumericalError, WeightCollapseError
from .sde import (
    ContinuousObservationPath,
    DiscreteObservationModel,
    SdeModel,
    _gen,
    flow_sample_batch,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- particles


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.positions, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (X.shape[0],):
            raise ValueError(f"{w.size} weights for {X.shape[0]} particles")
        if not np.all(np.isfinite(X)):
            raise NumericalError("particle positions must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("particle weights must be nonnegative and sum to 1")
        object.__setattr__(self, "positions", X)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, positions) -> "ParticleEnsemble":
        X = np.asarray(positions, dtype=float)
        m = X.shape[0]
        return cls(X, np.full(m, 1.0 / m))

    @property
    def m(self) -> int:
        return self.weights.size

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.positions

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights**2))

    def average(self, f: Callable) -> float:
        return float(self.weights @ np.asarray(f(self.positions), dtype=float).reshape(self.m))


def multinomial_resample(e: ParticleEnsemble, rng) -> ParticleEnsemble:
    """Draw m particles with replacement in proportion to the weights."""
    gen = _gen(rng)
    counts = gen.multinomial(e.m, e.weights)
    return ParticleEnsemble.uniform(np.repeat(e.positions, counts, axis=0))


def systematic_resample(e: ParticleEnsemble, rng) -> ParticleEnsemble:
    gen = _gen(rng)
    u = (gen.random() + np.arange(e.m)) / e.m
    cdf = np.cumsum(e.weights)
    cdf[-1] = 1.0
    return ParticleEnsemble.uniform(e.positions[np.searchsorted(cdf, u, side="right")])


RESAMPLERS = {"multinomial": multinomial_resample, "systematic": systematic_resample}


def _log_likelihood(obs: DiscreteObservationModel, X, y) -> np.ndarray:
    Rinv = np.linalg.inv(obs.R)
    r = np.atleast_1d(y) - np.atleast_2d(obs.h(X))
    return -0.5 * np.einsum("ki,ij,kj->k", r, Rinv, r)


@dataclass
class ParticleTrace:
    ensembles: List[ParticleEnsemble] = field(default_factory=list)
    resampled: List[bool] = field(default_factory=list)

    @property
    def means(self) -> np.ndarray:
        return np.array([e.mean for e in self.ensembles])


def sir_pf_run(
    transition_sampler: Callable,
    obs: DiscreteObservationModel,
    observations,
    m: int,
    init_sampler: Callable,
    rng,
    resampling: str = "multinomial",
    ess_threshold: Optional[float] = None,
) -> ParticleTrace:
    """Sequential importance resampling.

    ``transition_sampler(X, gen)`` moves an (m, d) cloud one step and
    ``init_sampler(m, gen)`` draws the initial cloud. Resampling happens every
    step unless ``ess_threshold`` (a fraction of m) is given.
    """
    if m < 1:
        raise ValueError("need at least one particle")
    gen = _gen(rng)
    resample = RESAMPLERS[resampling]
    e = ParticleEnsemble.uniform(init_sampler(m, gen))
    trace = ParticleTrace([e], [False])
    Y = np.asarray(observations, dtype=float).reshape(-1, obs.p)
    for y in Y:
        do = ess_threshold is None or e.ess < ess_threshold * m
        if do:
            e = resample(e, gen)
        X = np.asarray(transition_sampler(e.positions, gen), dtype=float).reshape(e.positions.shape)
        logw = np.log(np.maximum(e.weights, 1e-300)) + _log_likelihood(obs, X, y)
        top = np.max(logw)
        if not np.isfinite(top) or top < np.log(1e-300) - 700:
            raise WeightCollapseError("all particle likelihoods underflowed")
        w = np.exp(logw - top)
        e = ParticleEnsemble(X, w / w.sum())
        trace.ensembles.append(e)
        trace.resampled.append(do)
    return trace


def model_transition_sampler(m: SdeModel, tau: float, substeps: int = 1) -> Callable:
    def sample(X, gen):
        return flow_sample_batch(m, X, tau, substeps, gen)

    return sample


def acceptance_rejection_sample(
    target: Callable,
    proposal_sampler: Callable,
    proposal_density: Callable,
    bound: float,
    rng,
    size: int = 1,
    min_rate: float = 1e-4,
    min_trials: int = 100_000,
    batch: Optional[int] = None,
) -> np.ndarray:
    """Exact draws from ``target`` using ``target <= bound * proposal``.

    Raises when the envelope is violated at a proposed point or when the
    running acceptance rate falls below ``min_rate`` after ``min_trials``.
    """
    gen = _gen(rng)
    out = []
    have, trials = 0, 0
    batch = batch or max(64, 2 * size)
    while have < size:
        x = proposal_sampler(batch, gen)
        t = target(x)
        q = proposal_density(x)
        ratio = t / (bound * q)
        if np.any(ratio > 1.0 + 1e-12):
            raise AcceptanceRejectionError(
                f"envelope violated: target/(M*proposal) reached {float(np.max(ratio)):.6g}"
            )
        acc = x[gen.random(batch) < ratio]
        out.append(acc)
        have += acc.shape[0]
        trials += batch
        if trials >= min_trials and have / trials < min_rate:
            raise AcceptanceRejectionError(
                f"acceptance rate {have / trials:.3g} below {min_rate} after {trials} proposals (M={bound:.3g})"
            )
    return np.concatenate(out)[:size]


def benes_envelope(x_prev: float, dt: float, half_width: float) -> float:
    """Bound on ``target/proposal`` over ``x_prev +- half_width`` for the truncated proposal.

    The target is ``cosh(x)/cosh(x_prev) e^{-dt/2} N(x; x_prev, dt)`` and the
    proposal is ``N(x_prev, dt)`` restricted to the window (mass ``Z``), so the
    ratio is ``Z e^{-dt/2} cosh(x)/cosh(x_prev)``, largest at the window edge.
    """
    z = 1.0 - 2.0 * np.exp(log_ndtr(-half_width / np.sqrt(dt)))
    edge = abs(x_prev) + half_width
    log_ratio = np.logaddexp(edge, -edge) - np.logaddexp(x_prev, -x_prev) - 0.5 * dt
    return float(z * np.exp(log_ratio))


def _log_cosh(x):
    return np.logaddexp(x, -x) - np.log(2.0)


def benes_transition_sampler(dt: float, width: float = 8.0, max_rounds: int = 10_000) -> Callable:
    """Vectorized acceptance-rejection sampler for the Benes transition.

    Proposals come from ``N(x_prev, dt)`` truncated to ``x_prev +- width*sqrt(dt)``
    (neglected tail mass ``2 Phi(-width)``). With the envelope of
    ``benes_envelope`` the acceptance probability is ``cosh(x)/cosh(edge)``.
    """
    s = np.sqrt(dt)
    hw = width * s

    def sample(X, gen):
        x0 = np.asarray(X, dtype=float).reshape(-1)
        out = np.empty_like(x0)
        pending = np.arange(x0.size)
        rounds = 0
        while pending.size:
            k = x0[pending]
            prop = k + s * gen.standard_normal(k.size)
            inside = np.abs(prop - k) <= hw
            log_acc = _log_cosh(prop) - _log_cosh(np.abs(k) + hw)
            accept = inside & (np.log(gen.random(k.size)) < log_acc)
            out[pending[accept]] = prop[accept]
            pending = pending[~accept]
            rounds += 1
            if rounds > max_rounds:
                raise AcceptanceRejectionError(
                    f"{pending.size} particles unaccepted after {max_rounds} proposals each "
                    f"(rate below {1.0 / max_rounds:.0e})"
                )
        return out.reshape(np.shape(X))

    return sample


# ---------------------------------------------------------------- Kalman family


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        C = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if C.shape != (m.size, m.size):
            raise ValueError(f"covariance shape {C.shape} does not match mean of size {m.size}")
        if np.max(np.abs(C - C.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(C))):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", C)


@dataclass
class BeliefTrace:
    beliefs: List[GaussianBelief] = field(default_factory=list)
    times: List[float] = field(default_factory=list)
    repairs: int = 0

    @property
    def means(self) -> np.ndarray:
        return np.array([b.mean for b in self.beliefs])

    @property
    def covs(self) -> np.ndarray:
        return np.array([b.cov for b in self.beliefs])


def _kalman_update(m, C, y, h_val, Hj, R):
    S = Hj @ C @ Hj.T + R
    try:
        K = np.linalg.solve(S, Hj @ C).T
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance is singular") from None
    m = m + K @ (y - h_val)
    C = C - K @ S @ K.T
    return m, 0.5 * (C + C.T)


def exkf_discrete(
    flow: Callable,
    flow_jacobian: Callable,
    Sigma,
    h: Callable,
    h_jacobian: Callable,
    R,
    observations,
    init: GaussianBelief,
) -> BeliefTrace:
    """Classical EKF: linearized predict through ``flow``, then update on ``h``.

    ``flow`` and ``h`` map a single state vector; the jacobians return matrices.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    m, C = init.mean.copy(), init.cov.copy()
    trace = BeliefTrace([init], [0.0])
    for j, y in enumerate(np.asarray(observations, dtype=float).reshape(-1, R.shape[0]), start=1):
        F = np.atleast_2d(flow_jacobian(m))
        if not np.all(np.isfinite(F)):
            raise NumericalError(f"flow jacobian not finite at step {j}")
        m = np.atleast_1d(flow(m)).astype(float)
        C = F @ C @ F.T + Sigma
        Hj = np.atleast_2d(h_jacobian(m))
        m, C = _kalman_update(m, C, y, np.atleast_1d(h(m)), Hj, R)
        trace.beliefs.append(GaussianBelief(m, C))
        trace.times.append(float(j))
    return trace


def exkf_linear(A, shift, Sigma, H, R, observations, init: GaussianBelief) -> BeliefTrace:
    """EKF on ``x' = A x + shift + noise``, ``y = H x + noise``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    return exkf_discrete(
        lambda x: A @ x + shift, lambda x: A, Sigma, lambda x: H @ x, lambda x: H, R, observations, init
    )


def _repair_psd(C, floor: float = 0.0):
    C = 0.5 * (C + C.T)
    vals, vecs = np.linalg.eigh(C)
    if vals.min() >= floor:
        return C, False
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, True


def exkf_continuous(
    drift: Callable,
    drift_jacobian: Callable,
    Sigma_c,
    h: Callable,
    h_jacobian: Callable,
    path: ContinuousObservationPath,
    init: GaussianBelief,
    dt: Optional[float] = None,
) -> BeliefTrace:
    """Euler-discretized extended Kalman-Bucy filter on the observation grid.

    ``dm = f(m) dt + C H^T R^{-1} (dz - h(m) dt)`` and
    ``dC = (F C + C F^T + Sigma - C H^T R^{-1} H C) dt``. The covariance is
    symmetrized and its eigenvalues floored at zero each step; the number of
    repairs is counted on the trace. ``drift`` and ``h`` act on ``(k, d)`` arrays.
    """
    times = np.asarray(path.times, dtype=float)
    steps = np.diff(times)
    if dt is not None and np.max(np.abs(steps - dt)) > 1e-9 * max(dt, 1.0):
        raise ValueError(f"dt={dt} does not match the observation grid")
    Sigma_c = np.atleast_2d(np.asarray(Sigma_c, dtype=float))
    Rinv = np.linalg.inv(np.atleast_2d(path.R_c))
    dz = np.diff(np.asarray(path.z_values, dtype=float).reshape(times.size, -1), axis=0)
    m, C = init.mean.astype(float).copy(), init.cov.astype(float).copy()
    trace = BeliefTrace([init], [float(times[0])])
    for j, d in enumerate(steps):
        F = np.atleast_2d(drift_jacobian(m))
        Hj = np.atleast_2d(h_jacobian(m))
        hm = np.atleast_1d(np.asarray(h(m[None, :]))[0])
        fm = np.atleast_1d(np.asarray(drift(m[None, :]))[0])
        K = C @ Hj.T @ Rinv
        m = m + fm * d + K @ (dz[j] - hm * d)
        C = C + (F @ C + C @ F.T + Sigma_c - K @ Hj @ C) * d
        C, fixed = _repair_psd(C)
        if fixed:
            trace.repairs += 1
            log.debug("continuous EKF covariance repaired at step %d", j + 1)
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(C)):
            raise NumericalError(f"continuous EKF diverged at step {j + 1}")
        trace.beliefs.append(GaussianBelief(m, C))
        trace.times.append(float(times[j + 1]))
    return trace


def kalman_oracle_ou(lam: float, dt: float, Sigma: float, R: float, observations, init: GaussianBelief, H: float = 1.0) -> BeliefTrace:
    """Exact scalar Kalman recursion for ``x' = e^{-lam dt} x + N(0, Sigma)``, ``y = H x + N(0, R)``.

    ``observations`` may contain ``nan`` entries, which skip the update.
    """
    a = np.exp(-lam * dt)
    m, P = float(init.mean[0]), float(init.cov[0, 0])
    trace = BeliefTrace([init], [0.0])
    for j, y in enumerate(np.asarray(observations, dtype=float).reshape(-1), start=1):
        m, P = a * m, a * a * P + Sigma
        if np.isfinite(y) and np.isfinite(R):
            k = P * H / (H * H * P + R)
            m, P = m + k * (y - H * m), (1.0 - k * H) * P
        trace.beliefs.append(GaussianBelief([m], [[P]]))
        trace.times.append(j * dt)
    return trace


# ---------------------------------------------------------------- Benes-Daum


@dataclass(frozen=True)
class BenesDaumState:
    m: float
    P: float
    m_prior: float
    P_prior: float

    def __post_init__(self):
        if not self.P > 0:
            raise ValueError("posterior variance must be positive")


def benes_daum_states(observations, sigma2: float, dt: float, m0: float, P0: float) -> List[BenesDaumState]:
    """Parameter recursion: ``m^- = m``, ``P^- = P + dt``, then a scalar Kalman update."""
    if not P0 > 0:
        raise ValueError("P0 must be positive")
    states = [BenesDaumState(float(m0), float(P0), float(m0), float(P0))]
    m, P = float(m0), float(P0)
    for y in np.asarray(observations, dtype=float).reshape(-1):
        mp, Pp = m, P + dt
        k = Pp / (Pp + sigma2)
        m, P = mp + k * (y - mp), Pp * sigma2 / (Pp + sigma2)
        states.append(BenesDaumState(m, P, mp, Pp))
    return states


def benes_log_density(x, m: float, P: float, cosh_factor: bool = True):
    """Log of the normalized ``cosh(x) exp(-(x-m)^2/(2P))`` density.

    The normalizer is ``sqrt(2 pi P) exp(P/2) cosh(m)``.
    """
    x = np.asarray(x, dtype=float)
    gauss = -0.5 * (x - m) ** 2 / P - 0.5 * np.log(2 * np.pi * P)
    if not cosh_factor:
        return gauss
    return gauss + _log_cosh(x) - 0.5 * P - _log_cosh(m)


def benes_density(x, m: float, P: float, cosh_factor: bool = True):
    return np.exp(benes_log_density(x, m, P, cosh_factor))


@dataclass
class BenesDaumTrace:
    states: List[BenesDaumState]
    cosh_factor: bool = True

    def density(self, k: int, x, prior: bool = False):
        s = self.states[k]
        return benes_density(x, s.m_prior if prior else s.m, s.P_prior if prior else s.P, self.cosh_factor)

    def mean(self, k: int) -> float:
        """Posterior mean ``m + P tanh(m)``."""
        s = self.states[k]
        return s.m + s.P * np.tanh(s.m) if self.cosh_factor else s.m

    def grid(self, k: int, grid) -> np.ndarray:
        return self.density(k, grid)


def benes_daum_oracle(observations, sigma2: float, dt: float, m0: float, P0: float, cosh_factor: bool = True) -> BenesDaumTrace:
    """Closed-form Benes-Daum posterior family; ``cosh_factor=False`` gives the scalar Kalman filter."""
    return BenesDaumTrace(benes_daum_states(observations, sigma2, dt, m0, P0), cosh_factor)


def benes_initial_sampler(m0: float, P0: float) -> Callable:
    """Exact draws from ``cosh(x) N(x; m0, P0)`` as a two-component Gaussian mixture."""
    w_plus = 0.5 * (1.0 + np.tanh(m0))

    def sample(m, gen):
        sign = np.where(gen.random(m) < w_plus, 1.0, -1.0)
        return (m0 + sign * P0 + np.sqrt(P0) * gen.standard_normal(m))[:, None]

    return sample
