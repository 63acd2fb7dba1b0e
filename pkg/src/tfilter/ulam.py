"""Ulam discretization of the transfer operator over one assimilation step.

Entry ``P[i, j]`` is the probability that the time-``tau`` flow started
uniformly in box ``i`` lands in box ``j``. Rows are renormalized over
in-domain landings, so every produced matrix is row-stochastic.

Matrix file layout::

    b"TFPFO\\x00"  magic (6 bytes)
    uint64 LE     header length in bytes
    JSON header   (sorted keys, UTF-8)
    payload       dense: N*N float64 row-major
                  csr:   indptr int64[N+1], indices int64[nnz], data float64[nnz]
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyRowError, MatrixHeaderError
from .partition import Partition, _gauss_nodes, _interval_prob, locate_many
from .sde import RngStream, SdeModel, flow_sample_batch

FORMAT_VERSION = 1
MAGIC = b"TFPFO\x00"
DENSE_LIMIT = 2000
STOCHASTIC_TOL = 1e-9


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic Ulam matrix plus estimation metadata."""

    matrix: object
    partition: Partition
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        M = self.matrix
        if sp.issparse(M):
            M = sp.csr_matrix(M)
            M.sort_indices()
        else:
            M = np.ascontiguousarray(M, dtype=float)
        n = self.partition.n_boxes
        if M.shape != (n, n):
            raise MatrixHeaderError(f"matrix shape {M.shape} does not match partition N={n}")
        object.__setattr__(self, "matrix", M)
        check_stochastic(M)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.matrix)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray() if self.is_sparse else self.matrix

    def left_multiply(self, u: np.ndarray) -> np.ndarray:
        """Row vector times matrix, ``u @ P``."""
        if self.is_sparse:
            return self.matrix.T @ u
        return u @ self.matrix

    @property
    def discard_fractions(self) -> np.ndarray:
        d = self.meta.get("discard_fractions")
        return np.zeros(self.n) if d is None else np.asarray(d, dtype=float)

    def standard_errors(self) -> np.ndarray:
        """Per-entry Monte-Carlo standard errors ``sqrt(P(1-P)/n_in)`` (dense).

        Zero for quadrature estimates.
        """
        P = self.dense()
        if self.meta.get("estimator") != "monte_carlo":
            return np.zeros_like(P)
        n_in = np.asarray(self.meta["in_domain_counts"], dtype=float)
        return np.sqrt(P * (1.0 - P) / n_in[:, None])


def check_stochastic(M, tol: float = STOCHASTIC_TOL):
    data = M.data if sp.issparse(M) else M
    if data.size and (np.min(data) < 0 or np.max(data) > 1 + tol):
        raise ValueError("transition matrix entries must lie in [0, 1]")
    rows = np.asarray(M.sum(axis=1)).ravel()
    if np.max(np.abs(rows - 1.0)) > tol:
        bad = int(np.argmax(np.abs(rows - 1.0)))
        raise ValueError(f"row {bad} sums to {rows[bad]!r}, not 1")


def _assemble(rows, cols, vals, n, sparse_threshold):
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    M.sum_duplicates()
    if n < sparse_threshold:
        return M.toarray()
    return M


def _start_points(p: Partition, i: int, n: int, gen: np.random.Generator, stratified: bool):
    lo, _ = p.box_bounds(i)
    if not stratified:
        u = gen.random((n, p.dim))
    else:
        k = int(np.ceil(n ** (1.0 / p.dim) - 1e-12))
        cells = gen.permutation(k**p.dim)[:n]
        idx = np.stack(np.unravel_index(cells, (k,) * p.dim), axis=1)
        u = (idx + gen.random((n, p.dim))) / k
    return lo + u * p.widths


def _land(p: Partition, Y: np.ndarray, mode: str):
    if mode == "absorb":
        lo, hi = p.domain.lower, p.domain.upper
        Y = np.clip(Y, lo, np.nextafter(hi, lo))
    return locate_many(p, Y)


def estimate_transition_matrix(
    p: Partition,
    m: SdeModel,
    tau: float,
    n_samples: int,
    substeps: int = 1,
    rng=0,
    out_of_domain: str = "renormalize",
    stratified: bool = False,
    sparse_threshold: int = DENSE_LIMIT,
    workers: int = 1,
) -> TransitionMatrix:
    """Monte-Carlo Ulam estimate with ``n_samples`` uniform start points per box.

    Row ``i`` uses the derived stream ``rng.child(i)``, so the result does not
    depend on ``workers``. Out-of-domain landings are discarded and the row is
    renormalized (``"renormalize"``) or clipped onto the nearest boundary box
    (``"absorb"``).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if out_of_domain not in ("renormalize", "absorb"):
        raise ValueError("out_of_domain must be 'renormalize' or 'absorb'")
    if m.dim != p.dim:
        raise ValueError(f"model dimension {m.dim} != partition dimension {p.dim}")
    stream = rng if isinstance(rng, RngStream) else RngStream(rng)
    N = p.n_boxes

    def row(i):
        gen = stream.child(i).generator
        X = _start_points(p, i, n_samples, gen, stratified)
        Y = flow_sample_batch(m, X, tau, substeps, gen)
        left = np.count_nonzero(np.any((Y < p.domain.lower) | (Y >= p.domain.upper), axis=1))
        j = _land(p, Y, out_of_domain)
        j = j[j >= 0]
        if j.size == 0:
            raise EmptyRowError(i, n_samples)
        cols, counts = np.unique(j, return_counts=True)
        return cols, counts, j.size, left

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(row, range(N)))
    else:
        results = [row(i) for i in range(N)]

    n_in = np.array([r[2] for r in results], dtype=np.int64)
    n_left = np.array([r[3] for r in results], dtype=np.int64)
    rows = np.repeat(np.arange(N), [r[0].size for r in results])
    cols = np.concatenate([r[0] for r in results])
    vals = np.concatenate([r[1] / r[2] for r in results])
    M = _assemble(rows, cols, vals, N, sparse_threshold)
    meta = {
        "estimator": "monte_carlo",
        "tau": float(tau),
        "n_samples": int(n_samples),
        "seed": stream.seed,
        "substeps": int(substeps),
        "model": m.name,
        "out_of_domain": out_of_domain,
        "in_domain_counts": n_in.tolist(),
        # fraction of landings outside the domain (dropped or clipped, per the policy)
        "discard_fractions": (n_left / n_samples).tolist(),
    }
    return TransitionMatrix(M, p, meta)


def _gaussian_kernel_1d(edges: np.ndarray, a: float, shift: float, var: float, nodes: int):
    """Box-averaged Gaussian CDF differences for ``x -> a x + shift + N(0, var)``."""
    t, w = _gauss_nodes(nodes)
    lo, width = edges[:-1], np.diff(edges)
    x = lo[:, None] + t[None, :] * width[:, None]  # (N, nodes)
    mu = a * x + shift
    if var <= 0:
        # deterministic map: locate the images directly
        j = np.searchsorted(edges, mu, side="right") - 1
        n = len(lo)
        P = np.zeros((n, n))
        ok = (j >= 0) & (j < n) & (mu < edges[-1])
        for q in range(len(t)):
            np.add.at(P, (np.nonzero(ok[:, q])[0], j[ok[:, q], q]), w[q])
        return P
    s = np.sqrt(var)
    z = (edges[None, None, :] - mu[:, :, None]) / s  # (N, nodes, N+1)
    probs = _interval_prob(z[:, :, :-1], z[:, :, 1:])
    return np.einsum("q,iqj->ij", w, probs)


def gaussian_kernel_matrix(
    p: Partition,
    linear_map,
    shift,
    noise_cov,
    nodes: int = 16,
    sparse_threshold: int = DENSE_LIMIT,
) -> TransitionMatrix:
    """Quadrature-exact Ulam matrix for the kernel ``x -> A x + shift + N(0, C)``.

    Supports diagonal ``A`` and ``C`` (the kernel then factorizes per axis);
    rows are renormalized over in-domain mass.
    """
    A = np.atleast_2d(np.asarray(linear_map, dtype=float))
    C = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    b = np.atleast_1d(np.asarray(shift, dtype=float))
    d = p.dim
    if A.shape != (d, d) or C.shape != (d, d) or b.shape != (d,):
        raise ValueError("linear_map, shift and noise_cov must match the partition dimension")
    if np.count_nonzero(A - np.diag(np.diag(A))) or np.count_nonzero(C - np.diag(np.diag(C))):
        raise NotImplementedError("gaussian_kernel_matrix supports diagonal A and noise_cov only")
    cdiag = np.diag(C)
    if np.any(cdiag < 0):
        raise ValueError("noise covariance must be positive semidefinite")
    if np.any((cdiag > 0) & (cdiag < 1e-300)):
        raise ValueError("noise covariance is ill-conditioned")
    M = np.ones((1, 1))
    for ax in range(d):
        Pax = _gaussian_kernel_1d(p.edges(ax), A[ax, ax], b[ax], cdiag[ax], nodes)
        M = np.kron(M, Pax)
    inside = M.sum(axis=1)
    if np.any(inside <= 0):
        bad = int(np.argmin(inside))
        raise EmptyRowError(bad, 0)
    M = M / inside[:, None]
    if p.n_boxes >= sparse_threshold:
        M = sp.csr_matrix(M)
    meta = {
        "estimator": "quadrature",
        "nodes": int(nodes),
        "linear_map": A.tolist(),
        "shift": b.tolist(),
        "noise_cov": C.tolist(),
        "discard_fractions": np.clip(1.0 - inside, 0.0, 1.0).tolist(),
    }
    return TransitionMatrix(M, p, meta)


def model_kernel_matrix(p: Partition, m: SdeModel, tau: float, nodes: int = 16) -> TransitionMatrix:
    """Quadrature Ulam matrix for a model with a linear-Gaussian exact step."""
    if m.linear_step is None:
        raise ValueError(f"model {m.name!r} has no linear-Gaussian step")
    A, shift, C = m.linear_step(tau)
    tm = gaussian_kernel_matrix(p, A, shift, C, nodes)
    tm.meta.update({"tau": float(tau), "model": m.name})
    return tm


def max_entry_deviation(a: TransitionMatrix, b: TransitionMatrix) -> float:
    if a.n != b.n:
        raise MatrixHeaderError(f"matrix sizes differ: {a.n} vs {b.n}")
    D = a.matrix - b.matrix
    if sp.issparse(D):
        return float(abs(D).max()) if D.nnz else 0.0
    return float(np.max(np.abs(D)))


def mc_convergence_check(
    p: Partition,
    m: SdeModel,
    tau: float,
    sample_sizes: Sequence[int],
    rng=0,
    substeps: int = 1,
    reference: Optional[TransitionMatrix] = None,
):
    """``max |P_n - P_ref|`` for every n; the reference defaults to the largest n.

    Every estimate uses the same seed, so ``n == n_ref`` reproduces the
    reference exactly.
    """
    seed = rng.seed if isinstance(rng, RngStream) else int(rng)
    sizes = sorted(int(n) for n in sample_sizes)
    if reference is None:
        reference = estimate_transition_matrix(p, m, tau, sizes[-1], substeps, RngStream(seed))
    table = []
    for n in sizes:
        est = estimate_transition_matrix(p, m, tau, n, substeps, RngStream(seed))
        table.append({"n": n, "deviation": max_entry_deviation(est, reference)})
    return table


# ------------------------------------------------------------------------ files


def write_payload(path, header: dict, arrays: Sequence[np.ndarray]):
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def read_payload(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise MatrixHeaderError(f"{path}: not a tfilter matrix file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + hlen].decode())
    return header, memoryview(blob)[start + hlen :]


def save_matrix(tm: TransitionMatrix, path):
    header = {"version": FORMAT_VERSION, "N": tm.n, "partition": tm.partition.header()}
    header.update(tm.meta)
    if tm.is_sparse:
        M = tm.matrix
        header.update(storage="csr", nnz=int(M.nnz))
        arrays = [M.indptr.astype("<i8"), M.indices.astype("<i8"), M.data.astype("<f8")]
    else:
        header["storage"] = "dense"
        arrays = [tm.matrix.astype("<f8")]
    write_payload(path, header, arrays)


def load_matrix(path, partition: Optional[Partition] = None) -> TransitionMatrix:
    """Load a matrix file; ``partition`` (if given) must match the stored header."""
    header, buf = read_payload(path)
    if header.get("version") != FORMAT_VERSION:
        raise MatrixHeaderError(f"unsupported matrix file version {header.get('version')}")
    stored = Partition.from_header(header["partition"])
    N = int(header["N"])
    if partition is not None and (partition != stored or partition.n_boxes != N):
        raise MatrixHeaderError(
            f"matrix file has N={N} boxes {header['partition']} but the requested "
            f"partition has N={partition.n_boxes} boxes {partition.header()}"
        )
    if header["storage"] == "dense":
        M = np.frombuffer(buf, dtype="<f8", count=N * N).reshape(N, N).astype(float)
    else:
        nnz = int(header["nnz"])
        indptr = np.frombuffer(buf, dtype="<i8", count=N + 1)
        off = 8 * (N + 1)
        indices = np.frombuffer(buf, dtype="<i8", count=nnz, offset=off)
        data = np.frombuffer(buf, dtype="<f8", count=nnz, offset=off + 8 * nnz)
        M = sp.csr_matrix((data.astype(float), indices.astype(np.int64), indptr.astype(np.int64)), shape=(N, N))
    meta = {k: v for k, v in header.items() if k not in ("version", "N", "partition", "storage", "nnz")}
    return TransitionMatrix(M, stored, meta)
