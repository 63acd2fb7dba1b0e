"""Stochastic state models, observation models, and flow samplers.

All model callables are vectorized over a leading sample axis: ``drift`` maps
``(k, d) -> (k, d)``, ``diffusion`` maps ``(k, d) -> (k, d, q)`` and
``exact_step(X, dt, gen)`` draws the exact time-``dt`` transition of every row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatchError, DivergenceError


class RngStream:
    """Seeded random stream with deterministic, order-independent children.

    ``child(i)`` always yields the same stream for the same ``(seed, i)``,
    regardless of how many other children were drawn, so per-row or
    per-worker streams do not depend on scheduling.
    """

    def __init__(self, seed=0, spawn_key=()):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed), spawn_key=tuple(spawn_key))
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    def child(self, i: int) -> "RngStream":
        seq = np.random.SeedSequence(self._seq.entropy, spawn_key=tuple(self._seq.spawn_key) + (int(i),))
        return RngStream(seq)

    def children(self, n: int):
        return [self.child(i) for i in range(n)]


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return RngStream(0 if rng is None else rng).generator


@dataclass(frozen=True)
class SdeModel:
    """Time-homogeneous SDE ``dx = b(x) dt + sigma(x) dW``."""

    name: str
    dim: int
    drift: Callable
    diffusion: Callable
    exact_step: Optional[Callable] = None
    drift_jacobian: Optional[Callable] = None
    # dt -> (A, shift, Sigma) for models whose step is exactly linear-Gaussian
    linear_step: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def noise_covariance(self, x) -> np.ndarray:
        s = self.diffusion(np.atleast_2d(np.asarray(x, dtype=float)))[0]
        return s @ s.T


def _rows(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, dim) if dim == 1 else x.reshape(1, dim)
    if x.shape[-1] != dim:
        raise DimensionMismatchError(f"state has dimension {x.shape[-1]}, model has {dim}")
    return x


def _em(m: SdeModel, X, dt, gen):
    b = m.drift(X)
    s = m.diffusion(X)
    xi = gen.standard_normal((X.shape[0], s.shape[-1]))
    out = X + b * dt + np.einsum("kdq,kq->kd", s, xi) * np.sqrt(dt)
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"{m.name}: Euler-Maruyama produced non-finite state (dt={dt})")
    return out


def euler_maruyama_step(m: SdeModel, x, dt: float, rng) -> np.ndarray:
    """One step ``x + b(x) dt + sigma(x) sqrt(dt) xi``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    out = _em(m, _rows(x, m.dim), dt, _gen(rng))
    return out.reshape(x.shape)


def flow_sample_batch(m: SdeModel, X, tau: float, substeps: int, rng) -> np.ndarray:
    """Time-``tau`` flow of every row of ``X`` (exact step when available)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    gen = _gen(rng)
    X = _rows(X, m.dim)
    if m.exact_step is not None:
        out = np.asarray(m.exact_step(X, tau, gen), dtype=float)
        if not np.all(np.isfinite(out)):
            raise DivergenceError(f"{m.name}: exact step produced non-finite state")
        return out
    dt = tau / substeps
    for _ in range(substeps):
        X = _em(m, X, dt, gen)
    return X


def flow_sample(m: SdeModel, x0, tau: float, substeps: int, rng) -> np.ndarray:
    """One sample of the stochastic time-``tau`` flow started at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    out = flow_sample_batch(m, x0.reshape(1, m.dim), tau, substeps, rng)
    return out.reshape(x0.shape) if x0.size == m.dim else out[0]


# --------------------------------------------------------------------------- zoo


def _const_diffusion(sigma: np.ndarray):
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))

    def diffusion(X):
        return np.broadcast_to(sigma, (X.shape[0],) + sigma.shape)

    return diffusion


def ou_model(lam: float = 0.5, variance: str = "decay") -> SdeModel:
    """Ornstein-Uhlenbeck ``dx = -lam x dt + dW`` with an exact one-step map.

    ``variance="decay"`` uses step noise variance ``exp(-2 lam dt)``;
    ``variance="exact"`` uses the textbook ``(1 - exp(-2 lam dt)) / (2 lam)``.
    """
    if variance not in ("decay", "exact"):
        raise ValueError("variance must be 'decay' or 'exact'")

    def step_variance(dt):
        if variance == "decay":
            return float(np.exp(-2.0 * lam * dt))
        return float(-np.expm1(-2.0 * lam * dt) / (2.0 * lam))

    def linear_step(dt):
        return np.array([[np.exp(-lam * dt)]]), np.zeros(1), np.array([[step_variance(dt)]])

    def exact_step(X, dt, gen):
        return np.exp(-lam * dt) * X + np.sqrt(step_variance(dt)) * gen.standard_normal(X.shape)

    return SdeModel(
        name="ou",
        dim=1,
        drift=lambda X: -lam * X,
        diffusion=_const_diffusion([[1.0]]),
        exact_step=exact_step,
        drift_jacobian=lambda x: np.array([[-lam]]),
        linear_step=linear_step,
        params={"lam": lam, "variance": variance},
    )


def benes_model(exact: bool = True) -> SdeModel:
    """Benes SDE ``dx = tanh(x) dt + dW``.

    The transition law is the two-component mixture
    ``(1 +/- tanh x0)/2 * N(x0 +/- dt, dt)``, which the exact sampler uses.
    """

    def exact_step(X, dt, gen):
        up = gen.random(X.shape) < 0.5 * (1.0 + np.tanh(X))
        return X + np.where(up, dt, -dt) + np.sqrt(dt) * gen.standard_normal(X.shape)

    return SdeModel(
        name="benes",
        dim=1,
        drift=np.tanh,
        diffusion=_const_diffusion([[1.0]]),
        exact_step=exact_step if exact else None,
        drift_jacobian=lambda x: np.array([[1.0 / np.cosh(float(np.ravel(x)[0])) ** 2]]),
        params={"exact": exact},
    )


def lorenz63_model(a=10.0, b=8.0 / 3.0, r=28.0, sigmas=(2.0, 2.0, 2.0)) -> SdeModel:
    """Noisy Lorenz'63 in the shifted coordinates ``v3 = z - (r + a)``."""

    def drift(V):
        v1, v2, v3 = V[:, 0], V[:, 1], V[:, 2]
        return np.stack(
            [a * (v2 - v1), -a * v1 - v2 - v1 * v3, v1 * v2 - b * v3 - b * (r + a)], axis=1
        )

    def jacobian(v):
        v1, v2, v3 = np.ravel(v)
        return np.array([[-a, a, 0.0], [-a - v3, -1.0, -v1], [v2, v1, -b]])

    return SdeModel(
        name="lorenz63",
        dim=3,
        drift=drift,
        diffusion=_const_diffusion(np.diag(np.asarray(sigmas, dtype=float))),
        drift_jacobian=jacobian,
        params={"a": a, "b": b, "r": r, "sigmas": list(map(float, sigmas))},
    )


def identity_model(dim: int = 1) -> SdeModel:
    zero = np.zeros((dim, dim))
    return SdeModel(
        name="identity",
        dim=dim,
        drift=lambda X: np.zeros_like(X),
        diffusion=_const_diffusion(zero),
        exact_step=lambda X, dt, gen: np.array(X, dtype=float),
        drift_jacobian=lambda x: np.zeros((dim, dim)),
        linear_step=lambda dt: (np.eye(dim), np.zeros(dim), np.zeros((dim, dim))),
    )


def shift_model(shift: float = 0.5, period: float = 1.0) -> SdeModel:
    """Deterministic circle map ``x -> (x + shift) mod period``."""
    return SdeModel(
        name="shift",
        dim=1,
        drift=lambda X: np.zeros_like(X),
        diffusion=_const_diffusion([[0.0]]),
        exact_step=lambda X, dt, gen: np.mod(X + shift, period),
        params={"shift": shift, "period": period},
    )


MODEL_ZOO = {
    "ou": ou_model,
    "benes": benes_model,
    "lorenz63": lorenz63_model,
    "identity": identity_model,
    "shift": shift_model,
}


def make_model(name: str, **params) -> SdeModel:
    try:
        factory = MODEL_ZOO[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODEL_ZOO)}") from None
    return factory(**params)


def benes_transition_density(x_prev, x, dt: float):
    """Closed-form Benes transition density ``p(x | x_prev)`` over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x_prev = np.asarray(x_prev, dtype=float)
    x = np.asarray(x, dtype=float)
    # log cosh evaluated stably for large |x|
    lc = lambda u: np.logaddexp(u, -u) - np.log(2.0)
    logp = lc(x) - lc(x_prev) - 0.5 * dt - (x - x_prev) ** 2 / (2.0 * dt)
    return np.exp(logp) / np.sqrt(2.0 * np.pi * dt)


# ----------------------------------------------------------------- observations


@dataclass(frozen=True)
class DiscreteObservationModel:
    """``y = h(x) + eta`` with ``eta ~ N(0, R)``; ``h`` maps ``(k, d) -> (k, p)``."""

    h: Callable
    R: np.ndarray
    H: Optional[np.ndarray] = None
    h_jacobian: Optional[Callable] = None

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape[0] != R.shape[1]:
            raise ValueError("R must be square")
        if np.max(np.abs(R - R.T)) > 1e-12:
            raise ValueError("R must be symmetric")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        object.__setattr__(self, "R", R)

    @property
    def p(self) -> int:
        return self.R.shape[0]

    @classmethod
    def linear(cls, H, R) -> "DiscreteObservationModel":
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return cls(h=lambda X: np.atleast_2d(X) @ H.T, R=R, H=H, h_jacobian=lambda x: H)

    def jacobian(self, x) -> np.ndarray:
        if self.h_jacobian is not None:
            return np.atleast_2d(self.h_jacobian(x))
        return finite_difference_jacobian(lambda v: self.h(v.reshape(1, -1))[0], x)


def finite_difference_jacobian(f: Callable, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    f0 = np.atleast_1d(f(x))
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = step
        J[:, i] = (np.atleast_1d(f(x + dx)) - np.atleast_1d(f(x - dx))) / (2 * step)
    return J


@dataclass(frozen=True)
class ContinuousObservationPath:
    """Cumulative observation path ``z(t)`` with ``dz = h(x) dt + sqrt(R_c) dW``."""

    times: np.ndarray
    z_values: np.ndarray
    R_c: np.ndarray
    gamma: Optional[float] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        z = np.asarray(self.z_values, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if np.any(np.diff(t) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if z.shape[0] != t.size:
            raise ValueError("z_values and times lengths differ")
        if np.any(z[0] != 0):
            raise ValueError("observation path must start at z(0) = 0")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "z_values", z)
        object.__setattr__(self, "R_c", np.atleast_2d(np.asarray(self.R_c, dtype=float)))

    def increments(self, stride: int = 1):
        """Times and increments ``z_{j+1} - z_j`` on every ``stride``-th grid point."""
        idx = np.arange(0, self.times.size, stride)
        return self.times[idx], np.diff(self.z_values[idx], axis=0)


def simulate_path(m: SdeModel, x0, n_steps: int, dt: float, rng, substeps: int = 1):
    """Truth path on the grid ``0, dt, ..., n_steps*dt``; returns (times, states)."""
    gen = _gen(rng)
    states = np.empty((n_steps + 1, m.dim))
    states[0] = np.asarray(x0, dtype=float).reshape(m.dim)
    for k in range(n_steps):
        states[k + 1] = flow_sample_batch(m, states[k : k + 1], dt, substeps, gen)[0]
    return np.arange(n_steps + 1) * dt, states


def generate_truth_and_observations(
    model: SdeModel,
    obs: DiscreteObservationModel,
    x0,
    J: int,
    dt: float,
    rng,
    substeps: int = 1,
):
    """Truth ``x_0..x_J`` and observations ``y_k = h(x_k) + eta_k`` for k = 1..J.

    Returns ``(times, states, observations)`` with shapes ``(J+1,)``,
    ``(J+1, d)`` and ``(J, p)``.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    gen = _gen(rng)
    times, states = simulate_path(model, x0, J, dt, gen, substeps)
    L = np.linalg.cholesky(obs.R)
    hx = np.atleast_2d(obs.h(states[1:]))
    noise = gen.standard_normal((J, obs.p)) @ L.T
    return times, states, hx + noise


def generate_continuous_observation(h: Callable, gamma, states, dt: float, rng) -> ContinuousObservationPath:
    """Left-point discretization ``z_{j+1} = z_j + h(x_j) dt + sqrt(R_c dt) xi_j``.

    ``gamma`` is a scalar noise scale (``R_c = gamma^2 I``) or a covariance matrix.
    """
    gen = _gen(rng)
    hx = np.atleast_2d(h(np.asarray(states, dtype=float)))
    p = hx.shape[1]
    if np.ndim(gamma) == 0:
        R_c = float(gamma) ** 2 * np.eye(p)
        g = float(gamma)
    else:
        R_c = np.atleast_2d(np.asarray(gamma, dtype=float))
        g = None
    noise = gen.standard_normal((hx.shape[0] - 1, p)) @ np.linalg.cholesky(R_c).T if np.any(R_c) else 0.0
    inc = hx[:-1] * dt + np.sqrt(dt) * noise
    z = np.vstack([np.zeros((1, p)), np.cumsum(inc, axis=0)])
    return ContinuousObservationPath(np.arange(hx.shape[0]) * dt, z, R_c, g)


def write_observations_csv(path, times, states=None, observations=None, kind: str = "y"):
    """CSV with columns ``t, x_1..x_d, y_1..y_p`` (or ``z_*``).

    ``observations`` aligned with ``times[1:]`` (discrete) leave the first row's
    observation cells empty; a full-length array (continuous path) fills all rows.
    """
    times = np.asarray(times, dtype=float)
    n = times.size
    cols = ["t"]
    X = None if states is None else np.atleast_2d(np.asarray(states, dtype=float).reshape(n, -1))
    Y = None
    if X is not None:
        cols += [f"x_{i + 1}" for i in range(X.shape[1])]
    if observations is not None:
        Y = np.asarray(observations, dtype=float)
        Y = Y.reshape(Y.shape[0], -1)
        cols += [f"{kind}_{i + 1}" for i in range(Y.shape[1])]
    offset = 0 if Y is None else n - Y.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(n):
            row = [repr(float(times[k]))]
            if X is not None:
                row += [repr(float(v)) for v in X[k]]
            if Y is not None:
                row += [repr(float(v)) for v in Y[k - offset]] if k >= offset else [""] * Y.shape[1]
            w.writerow(row)


def read_observations_csv(path) -> dict:
    """Inverse of :func:`write_observations_csv`; missing cells drop out."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {"t": np.array([float(r[0]) for r in body])}
    for prefix in ("x", "y", "z"):
        idx = [i for i, c in enumerate(header) if c.startswith(prefix + "_")]
        if not idx:
            continue
        vals = [[r[i] for i in idx] for r in body]
        keep = [k for k, v in enumerate(vals) if all(s != "" for s in v)]
        out[prefix] = np.array([[float(s) for s in vals[k]] for k in keep])
        out[prefix + "_rows"] = np.array(keep)
    return out
