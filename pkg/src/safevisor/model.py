"""Concrete stochastic plant x(k+1) = A x + B u + E exp(F x) + R w, y = C x."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

#: Bit generator used for every random stream; recorded in scenario files.
RNG_ALGORITHM = "PCG64"

#: Stream identifiers passed to :func:`run_stream` as the second spawn-key entry.
NOISE_STREAM = 0
CONTROLLER_STREAM = 1


def _as_matrix(value, name, rows=None, cols=None):
    arr = np.atleast_2d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 2:
        raise ConfigError(f"{name}: expected a matrix, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ConfigError(f"{name}: expected {rows} rows, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ConfigError(f"{name}: expected {cols} columns, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemModel:
    """Affine dynamics plus a scalar exponential term and additive Gaussian noise.

    ``E`` (s x 1) and ``F`` (1 x s) may be omitted, in which case the
    exponential term is dropped.  ``input_bounds`` is an (m, 2) array of
    lower/upper limits.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    R: np.ndarray
    input_bounds: np.ndarray
    E: np.ndarray | None = None
    F: np.ndarray | None = None
    x0: np.ndarray | None = None
    bound_tol: float = 1e-9

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        s = A.shape[0]
        if A.shape != (s, s):
            raise ConfigError(f"A: must be square, got shape {A.shape}")
        B = _as_matrix(self.B, "B", rows=s)
        m = B.shape[1]
        C = _as_matrix(self.C, "C", cols=s)
        R = _as_matrix(self.R, "R", rows=s)
        bounds = _as_matrix(self.input_bounds, "input_bounds", rows=m, cols=2)
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigError("input_bounds: empty box (lower > upper)")
        E = F = None
        if (self.E is None) != (self.F is None):
            raise ConfigError("E and F must be given together")
        if self.E is not None:
            E = _as_matrix(self.E, "E").reshape(-1, 1)
            if E.shape[0] != s:
                raise ConfigError(f"E: expected {s} entries, got {E.shape[0]}")
            F = _as_matrix(self.F, "F", rows=1, cols=s)
        x0 = None
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1)
            if x0.shape != (s,):
                raise ConfigError(f"x0: expected {s} entries, got {x0.shape}")
        for name, value in (("A", A), ("B", B), ("C", C), ("R", R), ("input_bounds", bounds),
                            ("E", E), ("F", F), ("x0", x0)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def n_noise(self) -> int:
        return self.R.shape[1]

    def drift(self, x: np.ndarray) -> np.ndarray:
        """Autonomous part ``A x + E exp(F x)`` for a state or a batch of states."""
        x = np.asarray(x, dtype=np.float64)
        out = x @ self.A.T
        if self.E is not None:
            out = out + np.exp(x @ self.F.T) * self.E[:, 0]
        return out

    def check_input(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.n_inputs:
            raise ConfigError(f"input has {u.shape[-1]} entries, model expects {self.n_inputs}")
        lo, hi = self.input_bounds[:, 0], self.input_bounds[:, 1]
        if np.any(u < lo - self.bound_tol) or np.any(u > hi + self.bound_tol):
            raise ContractError(f"input {u} outside bounds {self.input_bounds.tolist()}")
        return u


def step(model: SystemModel, x, u, noise) -> np.ndarray:
    """One transition of the plant.  Works on single states or on batches."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_states:
        raise ConfigError(f"state has {x.shape[-1]} entries, model expects {model.n_states}")
    u = model.check_input(u)
    w = np.asarray(noise, dtype=np.float64)
    if w.shape[-1] != model.n_noise:
        raise ConfigError(f"noise has {w.shape[-1]} entries, model expects {model.n_noise}")
    return model.drift(x) + u @ model.B.T + w @ model.R.T


def output(model: SystemModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_states:
        raise ConfigError(f"state has {x.shape[-1]} entries, model expects {model.n_states}")
    return x @ model.C.T


def recover_noise(model: SystemModel, x_prev, u_prev, x_next) -> np.ndarray:
    """Least-squares estimate of the noise that moved ``x_prev`` to ``x_next``."""
    resid = np.asarray(x_next, dtype=np.float64) - model.drift(x_prev) - np.asarray(u_prev) @ model.B.T
    sol, *_ = np.linalg.lstsq(model.R, np.atleast_2d(resid).T, rcond=None)
    return sol.T.reshape(np.shape(resid)[:-1] + (model.n_noise,))


def run_stream(seed: int, run: int, stream: int = NOISE_STREAM) -> np.random.Generator:
    """Independent generator for one Monte Carlo run.

    Streams are split with ``SeedSequence(seed, spawn_key=(run, stream))`` so
    a run's randomness does not depend on how runs are batched.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(run), int(stream)))
    return np.random.Generator(getattr(np.random, RNG_ALGORITHM)(ss))


@dataclass
class NoiseStream:
    """Standard normal noise for one run, addressable by step index.

    Draws are generated in blocks, so ``sample(k)`` returns the same vector
    for a given (seed, run, k) no matter the order of queries.
    """

    seed: int
    run: int
    dim: int
    block: int = 4096
    _rng: np.random.Generator = field(init=False, repr=False)
    _cache: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = run_stream(self.seed, self.run, NOISE_STREAM)
        self._cache = np.empty((0, self.dim))

    def sample(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValueError("step index must be nonnegative")
        while k >= self._cache.shape[0]:
            more = self._rng.standard_normal((self.block, self.dim))
            self._cache = np.vstack([self._cache, more])
        return self._cache[k].copy()

    def block_until(self, horizon: int) -> np.ndarray:
        """Noise for steps ``0..horizon-1`` as a (horizon, dim) array."""
        if horizon > 0:
            self.sample(horizon - 1)
        return self._cache[:horizon].copy()


def sample_noise(stream: NoiseStream, k: int) -> np.ndarray:
    return stream.sample(k)
