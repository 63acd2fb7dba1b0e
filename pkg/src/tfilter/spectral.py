"""Left-eigenvector expansion of Ulam matrices and the low-rank filter.

Prediction at rank r keeps the r slowest-decaying modes:
``w_hat = sum_{i<r} lambda_i (w Xi^{-1})_i xi_i``. Complex modes are
stored in conjugate pairs so the truncated product stays real; each pair
enters as two real rows ``2 Re(lambda xi)`` and ``-2 Im(lambda xi)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .errors import (
    DefectiveMatrixError,
    DetailedBalanceError,
    DimensionMismatchError,
    MatrixHeaderError,
    ReducibleChainError,
)
from .filter_core import FilterTrace, analyze, likelihood_vector, LIKELIHOOD_FLOOR
from .partition import Partition, WeightVector
from .ulam import FORMAT_VERSION, TransitionMatrix, read_payload, write_payload

log = logging.getLogger(__name__)

PAIR_TOL = 1e-10
DEFAULT_COND_THRESHOLD = 1e14
GTH_LIMIT = 3000


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray

    def residual(self, tm: TransitionMatrix) -> float:
        return float(np.max(np.abs(tm.left_multiply(self.pi) - self.pi)))


@dataclass(frozen=True)
class SpectralModel:
    """Sorted spectrum, left eigenvectors (rows of ``left``) and their inverse.

    ``pair[i]`` is +1 for the first member of a conjugate pair, -1 for the
    second and 0 for a real mode.
    """

    eigenvalues: np.ndarray
    left: np.ndarray
    inverse: np.ndarray
    pair: np.ndarray
    condition: float
    symmetric: bool = False
    _cache: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict, compare=False, repr=False
    )

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    def effective_rank(self, r: int) -> int:
        """``r`` widened by one when it would split a conjugate pair."""
        if not 1 <= r <= self.n:
            raise ValueError(f"rank r={r} outside [1, {self.n}]")
        return r + 1 if self.pair[r - 1] == 1 else r

    def factors(self, r: int) -> Tuple[np.ndarray, np.ndarray]:
        """Real ``(U, B)`` with ``w_hat = (p @ U) @ B`` at rank ``r``."""
        r = self.effective_rank(r)
        if r in self._cache:
            return self._cache[r]
        lam = self.eigenvalues[:r]
        xi = self.left[:r]
        inv = self.inverse[:, :r]
        cols, rows = [], []
        for i in range(r):
            if self.pair[i] == 0:
                cols.append(inv[:, i].real)
                rows.append((lam[i] * xi[i]).real)
            elif self.pair[i] == 1:
                lx = lam[i] * xi[i]
                cols += [inv[:, i].real, inv[:, i].imag]
                rows += [2.0 * lx.real, -2.0 * lx.imag]
        U = np.ascontiguousarray(np.array(cols).T)
        B = np.ascontiguousarray(np.array(rows))
        self._cache[r] = (U, B)
        return U, B

    def residuals(self, tm: TransitionMatrix, r: Optional[int] = None) -> np.ndarray:
        """Relative residuals ``|xi P - lambda xi| / |xi|`` of the first r modes."""
        r = self.n if r is None else r
        xi = self.left[:r]
        P = tm.matrix
        xiP = (P.T @ xi.T).T if sp.issparse(P) else xi @ P
        res = np.linalg.norm(xiP - self.eigenvalues[:r, None] * xi, axis=1)
        return res / np.linalg.norm(xi, axis=1)


def _sort_modes(lam: np.ndarray) -> np.ndarray:
    # lexsort keys are last-primary: |lambda| desc, real desc, index
    idx = np.arange(lam.size)
    mag = np.round(np.abs(lam), 12)
    re = np.round(lam.real, 12)
    return np.lexsort((idx, -re, -mag))


def _pair_modes(lam: np.ndarray, xi: np.ndarray):
    """Reorder so conjugates are adjacent (positive imaginary first) and exactly conjugate."""
    n = lam.size
    lam = lam.copy()
    xi = xi.copy()
    pair = np.zeros(n, dtype=np.int8)
    i = 0
    while i < n:
        if abs(lam[i].imag) <= PAIR_TOL * max(1.0, abs(lam[i])):
            lam[i] = lam[i].real
            xi[i] = xi[i].real
            i += 1
            continue
        target = np.conj(lam[i])
        cand = [j for j in range(i + 1, n) if abs(lam[j] - target) <= 1e-8 * max(1.0, abs(lam[i]))]
        if not cand:
            raise DefectiveMatrixError(float("inf"), 0.0)
        j = cand[0]
        if j != i + 1:
            lam[[i + 1, j]] = lam[[j, i + 1]]
            xi[[i + 1, j]] = xi[[j, i + 1]]
        if lam[i].imag < 0:
            lam[i], xi[i] = lam[i + 1], xi[i + 1]
        lam[i + 1] = np.conj(lam[i])
        xi[i + 1] = np.conj(xi[i])
        pair[i], pair[i + 1] = 1, -1
        i += 2
    return lam, xi, pair


def eigendecompose(tm: TransitionMatrix, cond_threshold: float = DEFAULT_COND_THRESHOLD) -> SpectralModel:
    """Full left eigendecomposition of ``tm``, sorted by ``|lambda|`` descending."""
    P = tm.dense()
    lam, vl = sla.eig(P, left=True, right=False)
    xi = vl.conj().T
    order = _sort_modes(lam)
    lam, xi, pair = _pair_modes(lam[order], xi[order])
    # scale each mode so its largest entry is real and positive, unit norm
    k = np.argmax(np.abs(xi), axis=1)
    phase = xi[np.arange(xi.shape[0]), k]
    phase = phase / np.abs(phase)
    xi = xi / phase[:, None]
    xi = xi / np.linalg.norm(xi, axis=1)[:, None]
    for i in np.flatnonzero(pair == 1):
        xi[i + 1] = np.conj(xi[i])
    cond = float(np.linalg.cond(xi))
    if not np.isfinite(cond) or cond > cond_threshold:
        raise DefectiveMatrixError(cond, cond_threshold)
    inv = np.linalg.inv(xi)
    log.info("eigendecomposition: N=%d, cond(Xi)=%.3e", lam.size, cond)
    return SpectralModel(lam, xi, inv, pair, cond)


def _check_irreducible(P):
    ncomp, labels = connected_components(sp.csr_matrix(P), directed=True, connection="strong")
    if ncomp > 1:
        comps = [np.flatnonzero(labels == c).tolist() for c in range(ncomp)]
        raise ReducibleChainError(comps)


def _gth(P: np.ndarray) -> np.ndarray:
    A = np.array(P, dtype=float)
    n = A.shape[0]
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(n)
    pi[0] = 1.0
    for k in range(1, n):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def stationary(tm: TransitionMatrix) -> StationaryDistribution:
    """Left fixed vector of an irreducible stochastic matrix.

    Uses the subtraction-free GTH elimination up to ``GTH_LIMIT`` states and a
    sparse linear solve above.
    """
    P = tm.matrix
    _check_irreducible(P)
    if tm.n <= GTH_LIMIT:
        pi = _gth(tm.dense())
    else:
        A = (sp.csr_matrix(P).T - sp.identity(tm.n, format="csr")).tolil()
        A[0, :] = np.ones(tm.n)
        b = np.zeros(tm.n)
        b[0] = 1.0
        pi = np.maximum(spsolve(A.tocsr(), b), 0.0)
        pi /= pi.sum()
    return StationaryDistribution(pi)


def detailed_balance_violation(tm: TransitionMatrix, pi) -> float:
    P = tm.dense()
    F = np.asarray(pi)[:, None] * P
    return float(np.max(np.abs(F - F.T)))


def symmetrize(tm: TransitionMatrix, pi=None, eps: float = 1e-10):
    """Similarity transform ``S = D P D^{-1}`` with ``D = diag(sqrt(pi))``.

    Returns ``(S, SpectralModel)`` with real modes ``psi_j = D w_j`` where
    ``w_j`` are the orthonormal eigenvectors of ``S``.
    """
    if pi is None:
        pi = stationary(tm).pi
    pi = np.asarray(pi.pi if isinstance(pi, StationaryDistribution) else pi, dtype=float)
    viol = detailed_balance_violation(tm, pi)
    if viol > eps:
        raise DetailedBalanceError(viol, eps)
    if np.any(pi <= 0):
        raise DetailedBalanceError(float("inf"), eps)
    d = np.sqrt(pi)
    S = d[:, None] * tm.dense() / d[None, :]
    S = 0.5 * (S + S.T)
    alpha, W = np.linalg.eigh(S)
    order = _sort_modes(alpha.astype(complex))
    alpha, W = alpha[order], W[:, order]
    xi = (d[:, None] * W).T
    inv = W / d[:, None]
    cond = float(d.max() / d.min())
    sm = SpectralModel(
        alpha.astype(complex), xi.astype(complex), inv.astype(complex),
        np.zeros(alpha.size, dtype=np.int8), cond, symmetric=True,
    )
    return S, sm


@dataclass(frozen=True)
class LowRankPrior:
    prior: WeightVector
    clamped_mass: float
    imag_residue: float


def lr_prior(w: WeightVector, sm: SpectralModel, r: int) -> LowRankPrior:
    """Truncated prediction; negatives clamped to zero and their mass reported."""
    if len(w) != sm.n:
        raise DimensionMismatchError(f"weight vector has {len(w)} entries, model has {sm.n}")
    U, B = sm.factors(r)
    out = (w.probabilities @ U) @ B
    neg = out < 0
    clamped = float(-out[neg].sum())
    out[neg] = 0.0
    return LowRankPrior(WeightVector(out / w.box_measure, w.box_measure, False), clamped, 0.0)


def lr_predict(w: WeightVector, sm: SpectralModel, r: int) -> WeightVector:
    return lr_prior(w, sm, r).prior


def lr_predict_complex(w: WeightVector, sm: SpectralModel, r: int):
    """Reference complex evaluation; returns ``(real prior density, max imaginary residue)``."""
    r = sm.effective_rank(r)
    v = w.probabilities @ sm.inverse[:, :r]
    out = (sm.eigenvalues[:r] * v) @ sm.left[:r]
    return out.real / w.box_measure, float(np.max(np.abs(out.imag)))


def lr_propagate(w: WeightVector, sm: SpectralModel, r: int, steps: int) -> WeightVector:
    """Observation-free transport over ``steps`` steps, ``sum_i lambda_i^k v_i xi_i`` truncated at r.

    Negative entries are clamped to zero; the result is not renormalized.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    r = sm.effective_rank(r)
    v = w.probabilities @ sm.inverse[:, :r]
    out = ((sm.eigenvalues[:r] ** steps) * v) @ sm.left[:r]
    return WeightVector(np.maximum(out.real, 0.0) / w.box_measure, w.box_measure, False)


def lr_pfof_run(
    sm: SpectralModel,
    w0: WeightVector,
    observations,
    obs,
    p: Partition,
    r: int,
    times=None,
    tau: float = 1.0,
    floor: Optional[float] = LIKELIHOOD_FLOOR,
) -> FilterTrace:
    """Low-rank filter: truncated prediction followed by likelihood reweighting."""
    if not w0.normalized:
        raise ValueError("initial weight vector must be normalized")
    sm.effective_rank(r)
    Y = np.asarray(observations, dtype=float).reshape(-1, obs.p)
    if times is None:
        times = np.arange(len(Y) + 1) * tau
    trace = FilterTrace("lrpfof", p)
    trace.append(0, times[0], None, w0, rank=r, clamped_mass=0.0)
    w = w0
    for j, y in enumerate(Y, start=1):
        lp = lr_prior(w, sm, r)
        g = likelihood_vector(p, obs, y, floor)
        w = analyze(lp.prior, g)
        trace.append(j, times[j], lp.prior, w, rank=r, clamped_mass=lp.clamped_mass)
    return trace


def save_spectral(sm: SpectralModel, tm: TransitionMatrix, path) -> None:
    """Write the matrix header plus eigenvalue, left-vector, inverse and pair payloads."""
    header = {
        "version": FORMAT_VERSION,
        "kind": "spectral",
        "N": sm.n,
        "partition": tm.partition.header(),
        "condition": sm.condition,
        "symmetric": sm.symmetric,
        "tau": tm.meta.get("tau"),
    }
    arrays = [
        sm.eigenvalues.astype("<c16"),
        sm.left.astype("<c16"),
        sm.inverse.astype("<c16"),
        sm.pair.astype("<i1"),
    ]
    write_payload(path, header, arrays)


def load_spectral(path, partition: Optional[Partition] = None) -> SpectralModel:
    header, buf = read_payload(path)
    if header.get("kind") != "spectral" or header.get("version") != FORMAT_VERSION:
        raise MatrixHeaderError(f"{path}: not a spectral model file of version {FORMAT_VERSION}")
    n = int(header["N"])
    stored = Partition.from_header(header["partition"])
    if partition is not None and (partition != stored or partition.n_boxes != n):
        raise MatrixHeaderError(
            f"spectral file has N={n} boxes but the requested partition has N={partition.n_boxes}"
        )
    c = 16
    lam = np.frombuffer(buf, dtype="<c16", count=n).astype(complex)
    left = np.frombuffer(buf, dtype="<c16", count=n * n, offset=c * n).reshape(n, n).astype(complex)
    inv = np.frombuffer(buf, dtype="<c16", count=n * n, offset=c * (n + n * n)).reshape(n, n).astype(complex)
    pair = np.frombuffer(buf, dtype="<i1", count=n, offset=c * (n + 2 * n * n)).astype(np.int8)
    return SpectralModel(lam, left, inv, pair, float(header["condition"]), bool(header["symmetric"]))
