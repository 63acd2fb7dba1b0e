"""Bayesian recursion on indicator-basis weight vectors.

Prediction transports probability-per-box through the Ulam matrix;
analysis multiplies by the observation likelihood at box centers and
renormalizes. Vectors cross module boundaries in density convention.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, PartitionError, WeightCollapseError
from .partition import Partition, WeightVector, box_averages, mass_points, moments
from .sde import ContinuousObservationPath, DiscreteObservationModel
from .ulam import TransitionMatrix

LIKELIHOOD_FLOOR = 1e-300


@dataclass(frozen=True)
class LikelihoodVector:
    g: np.ndarray
    floor_applied: bool = False

    @property
    def kappa(self) -> float:
        """Largest kappa in (0, 1] with ``kappa <= g <= 1/kappa``."""
        lo, hi = float(np.min(self.g)), float(np.max(self.g))
        return min(1.0, lo, 1.0 / hi) if hi > 0 else 0.0


def _check_same(w: WeightVector, n: int, what: str = "transition matrix"):
    if len(w) != n:
        raise DimensionMismatchError(f"weight vector has {len(w)} entries, {what} has {n}")


def likelihood_vector(
    p: Partition,
    obs: DiscreteObservationModel,
    y,
    floor: Optional[float] = LIKELIHOOD_FLOOR,
    box_average: bool = False,
    nodes: int = 4,
) -> LikelihoodVector:
    """``g_i = exp(-(y - h(x_i))^T R^{-1} (y - h(x_i)) / 2)`` at box centers.

    ``box_average=True`` averages g over each box by quadrature instead.
    Entries are clamped below at ``floor`` (``None`` disables the floor).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (obs.p,):
        raise DimensionMismatchError(f"observation has shape {y.shape}, model expects ({obs.p},)")
    try:
        Rinv = np.linalg.inv(obs.R)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("observation covariance R is singular") from None

    def g(X):
        r = y - np.atleast_2d(obs.h(X))
        return np.exp(-0.5 * np.einsum("ki,ij,kj->k", r, Rinv, r))

    vals = box_averages(p, g, nodes) if box_average else g(mass_points(p))
    applied = False
    if floor is not None and np.any(vals < floor):
        vals = np.maximum(vals, floor)
        applied = True
    return LikelihoodVector(vals, applied)


def predict(w: WeightVector, tm: TransitionMatrix) -> WeightVector:
    """Prior weights ``W P`` (mass-preserving)."""
    _check_same(w, tm.n)
    mu = w.box_measure
    out = tm.left_multiply(w.weights * mu) / mu
    return WeightVector(np.maximum(out, 0.0), mu, w.normalized)


def predict_nonuniform(w: WeightVector, tm: TransitionMatrix, box_measures) -> WeightVector:
    """``w'_k = sum_i (mu_i / mu_k) w_i P_ik`` for per-box measures ``mu``."""
    mu = np.asarray(box_measures, dtype=float)
    _check_same(w, tm.n)
    if mu.shape != (tm.n,):
        raise DimensionMismatchError(f"{mu.size} box measures for {tm.n} boxes")
    if np.any(mu <= 0):
        raise PartitionError("box measures must be positive")
    out = tm.left_multiply(w.weights * mu) / mu
    wv = WeightVector(np.maximum(out, 0.0), mu, False)
    return WeightVector(wv.weights, mu, w.normalized and abs(wv.mass - 1) <= 1e-9)


def analyze(prior: WeightVector, g: LikelihoodVector) -> WeightVector:
    """Posterior ``w_i proportional to g_i * prior_i``, normalized."""
    g_ = g.g if isinstance(g, LikelihoodVector) else np.asarray(g, dtype=float)
    _check_same(prior, g_.size, "likelihood vector")
    tilde = g_ * prior.probabilities
    total = tilde.sum()
    if not total > 0:
        raise WeightCollapseError(
            "all reweighted masses are zero; enable the likelihood floor or enlarge the domain"
        )
    return WeightVector.from_probabilities(tilde / total, prior.box_measure)


def total_variation(wa: WeightVector, wb: WeightVector, p: Optional[Partition] = None) -> float:
    """Half the L1 distance between two densities on the same partition."""
    if len(wa) != len(wb):
        raise PartitionError(f"partition mismatch: {len(wa)} vs {len(wb)} boxes")
    if p is not None:
        _check_same(wa, p.n_boxes, "partition")
    return float(0.5 * np.sum(np.abs(wa.probabilities - wb.probabilities)))


@dataclass
class StepRecord:
    step: int
    time: float
    prior: Optional[WeightVector]
    posterior: WeightVector
    mean: np.ndarray
    cov: np.ndarray
    effective_support: float
    extra: dict = field(default_factory=dict)


@dataclass
class FilterTrace:
    method: str
    partition: Partition
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, step, time, prior, posterior, **extra):
        mean, cov = moments(self.partition, posterior)
        prob = posterior.probabilities
        ess = 1.0 / float(np.sum(prob**2))
        self.records.append(StepRecord(step, float(time), prior, posterior, mean, cov, ess, extra))

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @property
    def posteriors(self) -> List[WeightVector]:
        return [r.posterior for r in self.records]

    def to_csv(self, path, oracle_tv: Optional[Sequence[float]] = None):
        """Per step: step, t, mean components, covariance diagonal, TV to oracle."""
        d = self.partition.dim
        cols = ["step", "t"] + [f"mean_{i + 1}" for i in range(d)] + [f"var_{i + 1}" for i in range(d)]
        cols.append("tv_to_oracle")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for k, r in enumerate(self.records):
                tv = "" if oracle_tv is None else repr(float(oracle_tv[k]))
                wr.writerow(
                    [r.step, repr(r.time)]
                    + [repr(float(v)) for v in r.mean]
                    + [repr(float(v)) for v in np.diag(r.cov)]
                    + [tv]
                )

    def to_json(self, path, include_weights: bool = False, max_entries: int = 5_000_000):
        n = self.partition.n_boxes * len(self.records)
        if include_weights and n > max_entries:
            raise ValueError(f"trace has {n} weight entries (> {max_entries}); refusing to dump")
        doc = {"method": self.method, "partition": self.partition.header(), "steps": []}
        for r in self.records:
            item = {
                "step": r.step,
                "t": r.time,
                "mean": r.mean.tolist(),
                "cov": r.cov.tolist(),
                "effective_support": r.effective_support,
            }
            item.update({k: v for k, v in r.extra.items() if np.isscalar(v)})
            if include_weights:
                item["posterior"] = r.posterior.weights.tolist()
                item["prior"] = None if r.prior is None else r.prior.weights.tolist()
            doc["steps"].append(item)
        with open(path, "w") as fh:
            json.dump(doc, fh)


def pfof_run(
    tm: TransitionMatrix,
    w0: WeightVector,
    observations,
    obs: DiscreteObservationModel,
    p: Partition,
    times: Optional[Sequence[float]] = None,
    floor: Optional[float] = LIKELIHOOD_FLOOR,
    box_average: bool = False,
) -> FilterTrace:
    """Alternate prediction through ``tm`` and likelihood analysis per observation."""
    if not w0.normalized:
        raise ValueError("initial weight vector must be normalized")
    _check_same(w0, tm.n)
    Y = np.asarray(observations, dtype=float).reshape(-1, obs.p) if len(observations) else np.zeros((0, obs.p))
    tau = float(tm.meta.get("tau", 1.0))
    if times is None:
        times = np.arange(len(Y) + 1) * tau
    trace = FilterTrace("pfof", p)
    trace.append(0, times[0], None, w0)
    w = w0
    for j, y in enumerate(Y, start=1):
        prior = predict(w, tm)
        g = likelihood_vector(p, obs, y, floor, box_average)
        w = analyze(prior, g)
        trace.append(j, times[j], prior, w, kappa=g.kappa)
    return trace


def zakai_likelihood_log(p: Partition, h: Callable, R_c, dz, tau: float) -> np.ndarray:
    """``log g^c = <h, dz>_{R_c} - tau/2 |h|^2_{R_c}`` at box centers."""
    R_c = np.atleast_2d(np.asarray(R_c, dtype=float))
    Rinv = np.linalg.inv(R_c)
    H = np.atleast_2d(h(mass_points(p)))
    dz = np.atleast_1d(np.asarray(dz, dtype=float))
    return H @ Rinv @ dz - 0.5 * tau * np.einsum("ki,ij,kj->k", H, Rinv, H)


def zakai_step(
    w: WeightVector,
    tm: TransitionMatrix,
    h: Callable,
    R_c,
    z_increment,
    tau: float,
    p: Partition,
):
    """One split step ``W' = G (W P)`` of the unnormalized posterior.

    Returns the rescaled working vector (mass one) and the log of the factor
    divided out, so the unnormalized density is ``exp(log_norm) * W'``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    prior = tm.left_multiply(w.probabilities)
    logg = zakai_likelihood_log(p, h, R_c, z_increment, tau)
    shift = float(np.max(logg))
    un = prior * np.exp(logg - shift)
    total = un.sum()
    if not total > 0:
        raise WeightCollapseError("Zakai weights underflowed to zero")
    log_norm = shift + float(np.log(total)) + float(np.log(w.mass))
    return WeightVector.from_probabilities(un / total, w.box_measure), log_norm


def zakai_run(
    tm: TransitionMatrix,
    w0: WeightVector,
    path: ContinuousObservationPath,
    h: Callable,
    p: Partition,
    stride: int = 1,
) -> FilterTrace:
    """Zakai filter on the path grid subsampled by ``stride``.

    The running log-normalizer is stored per step under ``extra['log_norm']``.
    """
    times, dz = path.increments(stride)
    tau = float(times[1] - times[0]) if times.size > 1 else float(tm.meta.get("tau", 1.0))
    meta_tau = tm.meta.get("tau")
    if meta_tau is not None and abs(meta_tau - tau) > 1e-9 * max(1.0, tau):
        raise ValueError(f"matrix step tau={meta_tau} does not match observation step {tau}")
    trace = FilterTrace("zakai", p)
    trace.append(0, times[0], None, w0, log_norm=0.0)
    w, total = w0, 0.0
    for j in range(dz.shape[0]):
        prior = predict(w, tm)
        w, ln = zakai_step(w, tm, h, path.R_c, dz[j], tau, p)
        total += ln
        trace.append(j + 1, times[j + 1], prior, w, log_norm=total)
    return trace
