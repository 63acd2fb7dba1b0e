"""Uniform box partitions of a rectangular phase space and the indicator basis.

Boxes are half-open ``[a, b)`` along every axis, so the top faces of the
domain are outside. Flat box indices are row-major over dimensions (the last
axis varies fastest), i.e. ``numpy.ravel_multi_index(idx, counts)``.

Densities on a partition are stored in *density convention*: the weight of a
box is the average density over it, so ``sum(weights * box_measure) == 1`` for
a normalized vector. Multiply by the box measure to get probability per box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DimensionMismatchError, PartitionError

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class Domain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size == 0:
            raise PartitionError("domain bounds must be equal-length non-empty vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise PartitionError("domain bounds must be finite")
        if np.any(lo >= hi):
            raise PartitionError(f"degenerate domain: lower {lo.tolist()} !< upper {hi.tolist()}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def __eq__(self, other):
        return (
            isinstance(other, Domain)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __hash__(self):
        return hash((tuple(self.lower), tuple(self.upper)))


@dataclass(frozen=True)
class Partition:
    """Uniform grid of ``prod(counts)`` boxes over a :class:`Domain`."""

    domain: Domain
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) != self.domain.dim:
            raise PartitionError(
                f"{len(counts)} grid counts given for a {self.domain.dim}-D domain"
            )
        if any(c < 1 for c in counts):
            raise PartitionError(f"grid counts must be positive, got {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def n_boxes(self) -> int:
        return int(np.prod(self.counts))

    @property
    def widths(self) -> np.ndarray:
        return (self.domain.upper - self.domain.lower) / np.asarray(self.counts)

    @property
    def box_measure(self) -> float:
        return float(np.prod(self.widths))

    @property
    def box_measures(self) -> np.ndarray:
        return np.full(self.n_boxes, self.box_measure)

    def edges(self, axis: int) -> np.ndarray:
        lo, hi = self.domain.lower[axis], self.domain.upper[axis]
        return np.linspace(lo, hi, self.counts[axis] + 1)

    def multi_index(self, flat) -> np.ndarray:
        """Per-axis box indices, shape ``(..., dim)``."""
        return np.stack(np.unravel_index(flat, self.counts), axis=-1)

    def box_bounds(self, i: int):
        idx = self.multi_index(i)
        lo = self.domain.lower + idx * self.widths
        return lo, lo + self.widths

    def box_lower_corners(self) -> np.ndarray:
        idx = self.multi_index(np.arange(self.n_boxes))
        return self.domain.lower + idx * self.widths

    def header(self) -> dict:
        return {
            "lower": [float(v) for v in self.domain.lower],
            "upper": [float(v) for v in self.domain.upper],
            "counts": list(self.counts),
        }

    @classmethod
    def from_header(cls, header: dict) -> "Partition":
        return build_uniform_partition(Domain(header["lower"], header["upper"]), header["counts"])


@dataclass(frozen=True)
class WeightVector:
    """Nonnegative indicator-basis coefficients of a density.

    ``box_measure`` is a scalar for uniform partitions or a per-box array.
    """

    weights: np.ndarray
    box_measure: object = 1.0
    normalized: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a 1-D vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError(f"weights must be nonnegative (min {w.min():.3e})")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.normalized and abs(self.mass - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"vector flagged normalized but has mass {self.mass!r}")

    def __len__(self):
        return self.weights.size

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights * self.box_measure

    @property
    def mass(self) -> float:
        return float(np.sum(self.probabilities))

    def normalize(self) -> "WeightVector":
        m = self.mass
        if not m > 0:
            raise ValueError("cannot normalize a zero vector")
        return WeightVector(self.weights / m, self.box_measure, True)

    @classmethod
    def from_probabilities(cls, probs, box_measure, normalize: bool = True) -> "WeightVector":
        probs = np.asarray(probs, dtype=float)
        if normalize:
            probs = probs / probs.sum()
        return cls(probs / box_measure, box_measure, normalize)


def build_uniform_partition(domain: Domain, counts: Sequence[int]) -> Partition:
    """Uniform box partition with ``prod(counts)`` boxes, row-major indexing."""
    counts = np.atleast_1d(counts)
    if counts.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise PartitionError(f"grid counts must be integers, got {counts.tolist()}")
    return Partition(domain, tuple(int(c) for c in counts))


def _as_points(p: Partition, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if p.dim == 1 else x.reshape(1, -1)
    if x.shape[-1] != p.dim:
        raise DimensionMismatchError(f"points have dimension {x.shape[-1]}, partition has {p.dim}")
    return x


def locate_many(p: Partition, x) -> np.ndarray:
    """Flat box index per point, ``-1`` for points outside the domain."""
    x = _as_points(p, x)
    inside = np.all((x >= p.domain.lower) & (x < p.domain.upper), axis=1)
    rel = (x - p.domain.lower) / p.widths
    with np.errstate(invalid="ignore"):
        idx = np.floor(np.nan_to_num(rel, nan=-1.0, posinf=-1.0, neginf=-1.0))
    # rounding can push points just below the top face onto index == count
    idx = np.clip(idx, 0, np.asarray(p.counts) - 1).astype(np.int64)
    out = np.full(x.shape[0], -1, dtype=np.int64)
    if inside.any():
        out[inside] = np.ravel_multi_index(tuple(idx[inside].T), p.counts)
    return out


def locate(p: Partition, x) -> Optional[int]:
    """Index of the half-open box containing ``x``; ``None`` when outside."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (p.dim,):
        raise DimensionMismatchError(f"point has shape {x.shape}, partition dimension is {p.dim}")
    i = int(locate_many(p, x.reshape(1, -1))[0])
    return None if i < 0 else i


def mass_points(p: Partition) -> np.ndarray:
    """Box centers, shape ``(N, dim)``."""
    return p.box_lower_corners() + 0.5 * p.widths


def _gauss_nodes(nodes: int):
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def box_quadrature(p: Partition, nodes: int = 16):
    """Reference nodes in ``[0,1)^d`` and weights of a tensor Gauss-Legendre rule."""
    t, w = _gauss_nodes(nodes)
    grids = np.meshgrid(*([t] * p.dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * p.dim), indexing="ij")
    ref = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return ref, wts


def box_averages(p: Partition, f: Callable, nodes: int = 16, chunk: int = 2_000_000) -> np.ndarray:
    """Average of a vectorized function ``f((k, dim)) -> (k,)`` over every box."""
    ref, wts = box_quadrature(p, nodes)
    corners = p.box_lower_corners()
    out = np.empty(p.n_boxes)
    per = max(1, chunk // len(wts))
    for s in range(0, p.n_boxes, per):
        c = corners[s : s + per]
        pts = c[:, None, :] + ref[None, :, :] * p.widths
        vals = np.asarray(f(pts.reshape(-1, p.dim)), dtype=float).reshape(len(c), len(wts))
        out[s : s + per] = vals @ wts
    return out


def project_density(
    p: Partition,
    rho: Callable,
    nodes: int = 16,
    min_mass: float = 0.99,
) -> WeightVector:
    """L1 projection onto the indicator basis: box averages of ``rho``.

    ``rho`` maps an ``(k, dim)`` array of points to ``k`` nonnegative values.
    The result is normalized when the captured mass is within quadrature
    tolerance of one; a captured mass below ``min_mass`` raises.
    """
    avg = box_averages(p, rho, nodes)
    if np.any(avg < 0):
        raise ValueError("density takes negative values")
    mass = float(avg.sum() * p.box_measure)
    if mass < min_mass:
        raise PartitionError(
            f"domain captures only {mass:.6f} of the density mass (< {min_mass}); "
            "enlarge the domain or increase quadrature nodes"
        )
    if abs(mass - 1.0) <= 1e-6:
        return WeightVector(avg / mass, p.box_measure, True)
    return WeightVector(avg, p.box_measure, False)


def _interval_prob(a, b):
    """P(a <= Z < b) for standard normal Z without cancellation in the tails."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    upper = a > 0
    out = np.where(upper, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    return np.clip(out, 0.0, 1.0)


def project_gaussian(p: Partition, mean, cov, min_mass: float = 0.99) -> WeightVector:
    """Exact projection of N(mean, cov) for diagonal ``cov`` via CDF differences.

    Handles arbitrarily narrow Gaussians (point-mass initializations). A full
    covariance falls back to 16-node quadrature.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean.shape != (p.dim,) or cov.shape != (p.dim, p.dim):
        raise DimensionMismatchError("mean/cov shape does not match the partition dimension")
    if np.count_nonzero(cov - np.diag(np.diag(cov))):
        from scipy.stats import multivariate_normal

        dist = multivariate_normal(mean, cov)
        return project_density(p, dist.pdf, min_mass=min_mass)
    sd = np.sqrt(np.diag(cov))
    probs = np.ones(1)
    for d in range(p.dim):
        e = (p.edges(d) - mean[d]) / sd[d]
        probs = np.multiply.outer(probs, _interval_prob(e[:-1], e[1:])).reshape(-1)
    mass = float(probs.sum())
    if mass < min_mass:
        raise PartitionError(f"domain captures only {mass:.6f} of the Gaussian mass (< {min_mass})")
    return WeightVector.from_probabilities(probs, p.box_measure)


def moments(p: Partition, w: WeightVector):
    """Mean and covariance of the density, with mass concentrated at box centers."""
    if not w.normalized:
        raise ValueError("moments require a normalized weight vector")
    if len(w) != p.n_boxes:
        raise DimensionMismatchError(f"weight vector has {len(w)} entries, partition {p.n_boxes}")
    prob = w.probabilities
    x = mass_points(p)
    mean = prob @ x
    d = x - mean
    cov = (d * prob[:, None]).T @ d
    return mean, cov
