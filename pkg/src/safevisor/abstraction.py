"""Finite Markov abstraction of a reduced-order model on a uniform grid.

States are grid cells represented by their centers plus one absorbing sink
for everything outside the gridded box.  Transition probabilities are
products of one-dimensional Gaussian CDF differences, which is exact for
diagonal noise covariance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.special import ndtr

from .errors import ConfigError

log = logging.getLogger(__name__)

#: Entries below this are dropped and their mass is sent to the sink.
DEFAULT_PRUNE_TOL = 1e-14
#: Refuse to build kernels whose stored entries would exceed this many bytes.
DEFAULT_MEMORY_CAP = 2 * 1024**3


@dataclass(frozen=True)
class GridPartition:
    """Uniform tiling of a box.  Cells are numbered in C order, sink last."""

    lower: np.ndarray
    upper: np.ndarray
    counts: np.ndarray
    widths: np.ndarray = field(init=False)
    edges: tuple = field(init=False, repr=False)
    centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)
        if not (lo.shape == hi.shape == counts.shape):
            raise ConfigError("grid bounds and counts have different lengths")
        if np.any(counts < 1):
            raise ConfigError("grid counts must be at least 1")
        widths = (hi - lo) / counts
        if np.any(~(widths > 0)):
            raise ConfigError(f"nonpositive cell width {widths.tolist()}")
        edges = tuple(lo[d] + widths[d] * np.arange(counts[d] + 1) for d in range(len(lo)))
        for e, h in zip(edges, hi):
            e[-1] = h
        axes = [0.5 * (e[:-1] + e[1:]) for e in edges]
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([m.reshape(-1) for m in mesh], axis=1)
        for name, v in (("lower", lo), ("upper", hi), ("counts", counts), ("widths", widths),
                        ("centers", centers)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "edges", edges)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def sink(self) -> int:
        return self.n_cells

    @property
    def n_states(self) -> int:
        return self.n_cells + 1

    def axis_centers(self, d: int) -> np.ndarray:
        e = self.edges[d]
        return 0.5 * (e[:-1] + e[1:])

    def cell_bounds(self, index: int):
        """(lower, upper) corners of a grid cell."""
        sub = np.unravel_index(index, tuple(self.counts))
        lo = np.array([self.edges[d][i] for d, i in enumerate(sub)])
        hi = np.array([self.edges[d][i + 1] for d, i in enumerate(sub)])
        return lo, hi


def build_partition(bounds, counts) -> GridPartition:
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    return GridPartition(bounds[:, 0], bounds[:, 1], counts)


def locate(grid: GridPartition, x) -> np.ndarray:
    """Cell index of a point (d,) or batch (N, d); points outside map to the sink.

    Cells are half-open on the left except the first one, so a point on an
    interior boundary belongs to the lower-index cell.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != grid.dim:
        raise ConfigError(f"point has {x.shape[-1]} entries, grid expects {grid.dim}")
    inside = np.all((x >= grid.lower) & (x <= grid.upper), axis=-1)
    flat = np.zeros(x.shape[:-1], dtype=np.int64)
    for d in range(grid.dim):
        i = np.searchsorted(grid.edges[d], x[..., d], side="left") - 1
        i = np.clip(i, 0, grid.counts[d] - 1)
        flat = flat * grid.counts[d] + i
    return np.where(inside, flat, grid.sink)


def memory_estimate(n_states: int, n_inputs: int) -> int:
    """Bytes needed to store a dense kernel with 8-byte entries."""
    return int(n_states) ** 2 * int(n_inputs) * 8


def _interval_probs(lo_edges, hi_edges, mu, sigma):
    """P(lo < mu + sigma*w <= hi) for rows of ``mu`` against all cells."""
    if sigma == 0.0:
        m = mu[:, None]
        return ((m > lo_edges) & (m <= hi_edges) | (m == lo_edges) & (lo_edges == lo_edges[0])).astype(float)
    a = (lo_edges[None, :] - mu[:, None]) / sigma
    b = (hi_edges[None, :] - mu[:, None]) / sigma
    # upper-tail form keeps relative accuracy when both bounds sit right of the mean
    return np.where(a > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


@dataclass
class FiniteAbstraction:
    """Gridded abstraction of x' = A x + B u + E exp(F x) + R w.

    ``inputs`` holds the abstract input representatives used for synthesis
    (the restricted set); ``kernel`` is a CSR matrix with row ``x*U + u``
    giving the distribution over grid states and the sink.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    R: np.ndarray
    grid: GridPartition
    inputs: np.ndarray
    E: np.ndarray | None = None
    F: np.ndarray | None = None
    P: np.ndarray | None = None
    x0: np.ndarray | None = None
    prune_tol: float = DEFAULT_PRUNE_TOL
    kernel: sparse.csr_matrix | None = field(default=None, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        r = self.A.shape[0]
        if self.A.shape != (r, r):
            raise ConfigError("abstraction.A must be square")
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64)).reshape(r, -1)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64)).reshape(r, -1)
        if self.C.shape[1] != r:
            raise ConfigError("abstraction.C has the wrong number of columns")
        if self.grid.dim != r:
            raise ConfigError(f"grid dimension {self.grid.dim} != reduced state dimension {r}")
        if (self.E is None) != (self.F is None):
            raise ConfigError("abstraction.E and abstraction.F must be given together")
        if self.E is not None:
            self.E = np.asarray(self.E, dtype=np.float64).reshape(r, 1)
            self.F = np.asarray(self.F, dtype=np.float64).reshape(1, r)
        self.inputs = np.asarray(self.inputs, dtype=np.float64).reshape(len(self.inputs), -1)
        if self.inputs.shape[1] != self.B.shape[1]:
            raise ConfigError("abstract inputs do not match abstraction.B")
        if len(self.inputs) == 0:
            raise ConfigError("abstract input set is empty")
        if self.P is not None:
            self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64)).reshape(-1, r)
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(r)
        cov = self.R @ self.R.T
        off = cov - np.diag(np.diag(cov))
        if np.any(np.abs(off) > 1e-12 * max(1.0, np.abs(cov).max())):
            raise ConfigError("abstract noise covariance must be diagonal")
        self.sigma = np.sqrt(np.diag(cov))

    # --- geometry -----------------------------------------------------------

    @property
    def n_states(self) -> int:
        return self.grid.n_states

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    @property
    def sink(self) -> int:
        return self.grid.sink

    def representative(self, idx) -> np.ndarray:
        """Cell centers; the sink gets NaN."""
        idx = np.asarray(idx)
        pts = np.full(idx.shape + (self.grid.dim,), np.nan)
        ok = idx < self.grid.n_cells
        pts[ok] = self.grid.centers[idx[ok]]
        return pts

    def output(self, xhat) -> np.ndarray:
        return np.asarray(xhat, dtype=np.float64) @ self.C.T

    def drift(self, xhat) -> np.ndarray:
        xhat = np.asarray(xhat, dtype=np.float64)
        out = xhat @ self.A.T
        if self.E is not None:
            out = out + np.exp(xhat @ self.F.T) * self.E[:, 0]
        return out

    def mean(self, xhat, u) -> np.ndarray:
        """Noise-free successor of a continuous reduced state under input values ``u``."""
        return self.drift(xhat) + np.asarray(u, dtype=np.float64) @ self.B.T

    def initial_index(self) -> int:
        if self.x0 is None:
            raise ConfigError("abstraction has no initial state")
        return int(locate(self.grid, self.x0))

    # --- kernel -------------------------------------------------------------

    def build(self, memory_cap: int = DEFAULT_MEMORY_CAP) -> "FiniteAbstraction":
        self.kernel = build_kernel(self, memory_cap=memory_cap)
        return self

    def row_index(self, x, u):
        return np.asarray(x) * self.n_inputs + np.asarray(u)

    def scenario_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.A, self.B, self.C, self.R, self.E, self.F, self.inputs,
                    self.grid.lower, self.grid.upper, self.grid.counts):
            h.update(b"|" if arr is None else np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        h.update(repr(float(self.prune_tol)).encode())
        return h.hexdigest()


def _rows_probabilities(abs_: FiniteAbstraction, mu: np.ndarray, tol: float):
    """Sparse (rows, n_cells) probabilities for a block of Gaussian means."""
    grid = abs_.grid
    per_dim = []
    for d in range(grid.dim):
        e = grid.edges[d]
        p = _interval_probs(e[:-1], e[1:], mu[:, d], abs_.sigma[d])
        p[p < tol] = 0.0
        per_dim.append(p)
    dense = per_dim[0]
    for p in per_dim[1:]:
        dense = (dense[:, :, None] * p[:, None, :]).reshape(len(mu), -1)
    if tol > 0:
        dense[dense < tol] = 0.0
    return sparse.csr_matrix(dense)


def cell_probabilities(abs_: FiniteAbstraction, mu, tol: float | None = None) -> np.ndarray:
    """Dense distribution over grid cells and the sink for Gaussian means ``mu`` (N, r)."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    tol = abs_.prune_tol if tol is None else tol
    cells = _rows_probabilities(abs_, mu, tol).toarray()
    sink = np.clip(1.0 - cells.sum(axis=1), 0.0, 1.0)
    return np.hstack([cells, sink[:, None]])


def build_kernel(abs_: FiniteAbstraction, memory_cap: int = DEFAULT_MEMORY_CAP, chunk_entries: int = 4_000_000):
    """CSR kernel of shape (n_states*U, n_states) for all (state, input) pairs."""
    grid = abs_.grid
    n, U = grid.n_cells, abs_.n_inputs
    dense_bytes = memory_estimate(grid.n_states, U)
    log.info("building kernel: %d states x %d inputs (dense equivalent %.3g MiB)",
             grid.n_states, U, dense_bytes / 2**20)
    xs = np.repeat(np.arange(n), U)
    us = np.tile(np.arange(U), n)
    mu = abs_.mean(grid.centers[xs], abs_.inputs[us])
    block = max(1, chunk_entries // max(1, n))
    parts = []
    stored = 0
    for start in range(0, len(mu), block):
        part = _rows_probabilities(abs_, mu[start:start + block], abs_.prune_tol)
        stored += part.nnz * 16
        if stored > memory_cap:
            raise MemoryError(f"kernel exceeds memory cap of {memory_cap} bytes")
        parts.append(part)
    cells = sparse.vstack(parts, format="csr")
    sink_mass = np.clip(1.0 - np.asarray(cells.sum(axis=1)).ravel(), 0.0, 1.0)
    sink_col = sparse.csr_matrix(sink_mass[:, None])
    grid_rows = sparse.hstack([cells, sink_col], format="csr")
    sink_rows = sparse.csr_matrix((np.ones(U), (np.arange(U), np.full(U, n))), shape=(U, n + 1))
    kernel = sparse.vstack([grid_rows, sink_rows], format="csr")
    kernel.eliminate_zeros()
    kernel.sort_indices()
    return kernel


def kernel_row(abs_: FiniteAbstraction, x: int, u: int) -> np.ndarray:
    """Dense distribution over grid states and sink for one (state, input) pair."""
    if abs_.kernel is None:
        abs_.build()
    return abs_.kernel.getrow(int(abs_.row_index(x, u))).toarray().ravel()


# --- binary cache -----------------------------------------------------------

_MAGIC = b"SVKERN01"


def save_kernel(abs_: FiniteAbstraction, path) -> Path:
    """Write the kernel as a JSON header followed by little-endian CSR arrays."""
    K = abs_.kernel
    header = json.dumps({
        "shape": list(K.shape), "nnz": int(K.nnz), "n_inputs": abs_.n_inputs,
        "counts": abs_.grid.counts.tolist(), "hash": abs_.scenario_hash(),
    }).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(K.indptr.astype("<i8").tobytes())
        fh.write(K.indices.astype("<i8").tobytes())
        fh.write(K.data.astype("<f8").tobytes())
    return path


def load_kernel(abs_: FiniteAbstraction, path) -> sparse.csr_matrix:
    """Read a cached kernel, refusing caches built for a different abstraction."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ConfigError(f"{path}: not a kernel cache")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header["hash"] != abs_.scenario_hash():
        raise ConfigError(f"{path}: cache was built for a different scenario")
    rows, cols = header["shape"]
    nnz = header["nnz"]
    off = 12 + hlen
    indptr = np.frombuffer(raw, "<i8", rows + 1, off)
    off += 8 * (rows + 1)
    indices = np.frombuffer(raw, "<i8", nnz, off)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off)
    K = sparse.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(rows, cols))
    abs_.kernel = K
    return K
