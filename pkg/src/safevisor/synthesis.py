"""Finite-horizon dynamic programming on the product of abstraction and DFA.

Two criteria are supported.  In robust mode the accepting states are good
and the advisor maximizes the probability of reaching them while every
DFA step is resolved pessimistically over the eps-successor set.  In worst
mode the accepting states are bad and the advisor minimizes the probability
of reaching them with the DFA step resolved to the worst successor.  Each
step also loses ``delta`` of relation confidence.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .abstraction import FiniteAbstraction
from .errors import ConfigError
from .relation import ProbRelation, outside_masks, successor_sets
from .spec import LabellingFunction, Mode, SafetyAutomaton

log = logging.getLogger(__name__)

#: Successive slices closer than this (sup norm) end the recursion early.
STATIONARY_TOL = 1e-12
#: Assertion slack for probabilities leaving [0, 1] through rounding.
PROB_TOL = 1e-12
#: Upper limit on the number of recursion paths explored by the oracle.
BRUTE_FORCE_GUARD = 10**6


@dataclass
class Product:
    """Everything the recursions need, in array form.

    ``kernel`` has row ``x*U + u`` and one column per abstract state.
    ``succ[x, q, q2]`` marks the eps-successors of DFA state ``q`` at
    abstract state ``x``.  States flagged in ``pinned`` (the sink) hold
    ``pinned_value`` whenever the DFA state is not accepting.
    """

    kernel: sparse.csr_matrix
    n_inputs: int
    succ: np.ndarray
    accepting: np.ndarray
    delta: float
    mode: Mode
    pinned: np.ndarray
    pinned_value: float

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.kernel = sparse.csr_matrix(self.kernel)
        self.accepting = np.asarray(self.accepting, bool)
        self.succ = np.asarray(self.succ, bool)
        self.pinned = np.asarray(self.pinned, bool)
        S, nq = self.n_states, len(self.accepting)
        if self.kernel.shape != (S * self.n_inputs, S):
            raise ConfigError(f"kernel shape {self.kernel.shape} != ({S}*{self.n_inputs}, {S})")
        if self.succ.shape != (S, nq, nq):
            raise ConfigError("successor sets have the wrong shape")
        if not self.succ.any(axis=2).all():
            raise ConfigError("every (state, DFA state) pair needs at least one successor")
        if self.n_inputs < 1:
            raise ConfigError("empty abstract input set")
        some, every = outside_masks(self.succ, self.accepting)
        self.outside_some = some
        self.outside_every = every

    @property
    def n_states(self) -> int:
        return self.pinned.shape[0]

    @property
    def n_dfa(self) -> int:
        return len(self.accepting)

    def dense_kernel(self) -> np.ndarray:
        """Kernel as an (S, U, S) array (small instances only)."""
        return self.kernel.toarray().reshape(self.n_states, self.n_inputs, self.n_states)

    def resolve(self, V: np.ndarray) -> np.ndarray:
        """Per-(x, q) value of the pessimistic eps-successor: min (robust) or max (worst)."""
        vals = np.where(self.succ, V[:, None, :], np.inf if self.mode is Mode.ROBUST else -np.inf)
        return vals.min(axis=2) if self.mode is Mode.ROBUST else vals.max(axis=2)

    def resolve_index(self, V: np.ndarray) -> np.ndarray:
        """Index of the pessimistic eps-successor, lowest index on ties."""
        vals = np.where(self.succ, V[:, None, :], np.inf if self.mode is Mode.ROBUST else -np.inf)
        return vals.argmin(axis=2) if self.mode is Mode.ROBUST else vals.argmax(axis=2)

    def contract(self, V: np.ndarray) -> np.ndarray:
        """(S, U, nq) array of sum over successors of V(resolved) times the kernel."""
        G = self.resolve(V)
        return np.asarray(self.kernel @ G).reshape(self.n_states, self.n_inputs, self.n_dfa)

    def pin(self, V: np.ndarray) -> np.ndarray:
        V[np.ix_(self.pinned, ~self.accepting)] = self.pinned_value
        V[:, self.accepting] = 1.0
        return V

    def initial_values(self) -> np.ndarray:
        return self.pin(np.zeros((self.n_states, self.n_dfa)))

    def update(self, Q: np.ndarray) -> np.ndarray:
        """Bellman right-hand side from contracted values."""
        if self.mode is Mode.ROBUST:
            return (1.0 - self.delta) * Q
        return (1.0 - self.delta) * Q + self.delta


def build_product(abs_: FiniteAbstraction, automaton: SafetyAutomaton, labels: LabellingFunction,
                  rel: ProbRelation, sink_value: float | None = None) -> Product:
    if abs_.kernel is None:
        abs_.build()
    mode = automaton.mode
    if sink_value is None:
        sink_value = 0.0 if mode is Mode.ROBUST else 1.0
    pinned = np.zeros(abs_.n_states, bool)
    pinned[abs_.sink] = True
    return Product(
        kernel=abs_.kernel, n_inputs=abs_.n_inputs,
        succ=successor_sets(automaton, labels, abs_, rel.eps),
        accepting=automaton.accepting, delta=rel.delta, mode=mode,
        pinned=pinned, pinned_value=float(sink_value),
    )


@dataclass
class ValueTable:
    """Values indexed by time-to-go ``n`` with a compressed stationary tail.

    ``slices[n]`` is stored for ``n <= tail``; later slices equal the last one.
    """

    slices: list
    horizon: int
    mode: Mode
    tail: int | None = None

    def __getitem__(self, n: int) -> np.ndarray:
        if not 0 <= n <= self.horizon:
            raise IndexError(f"time-to-go {n} outside [0, {self.horizon}]")
        return self.slices[min(n, len(self.slices) - 1)]

    @property
    def final(self) -> np.ndarray:
        return self[self.horizon]

    def to_csv(self, path, n: int | None = None):
        n = self.horizon if n is None else n
        V = self[n]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state"] + [f"q{j}" for j in range(V.shape[1])])
            for i, row in enumerate(V):
                w.writerow([i] + [repr(float(v)) for v in row])


@dataclass
class PolicyTable:
    """Input indices by time-to-go; ``at(k)`` gives the table for time index ``k``."""

    slices: list
    horizon: int

    def by_togo(self, n: int) -> np.ndarray:
        if not 0 <= n < self.horizon:
            raise IndexError(f"time-to-go {n} outside [0, {self.horizon - 1}]")
        return self.slices[min(n, len(self.slices) - 1)]

    def at(self, k: int) -> np.ndarray:
        if not 0 <= k < self.horizon:
            raise IndexError(f"time index {k} outside [0, {self.horizon - 1}]")
        return self.by_togo(self.horizon - k - 1)

    @classmethod
    def constant(cls, table, horizon: int) -> "PolicyTable":
        return cls([np.asarray(table, dtype=np.int64)], horizon)


def _check_bounds(V: np.ndarray, n: int):
    if V.min() < -PROB_TOL or V.max() > 1.0 + PROB_TOL:
        raise FloatingPointError(f"value slice {n} leaves [0, 1]: [{V.min()}, {V.max()}]")


def synthesize(product: Product, horizon: int, stationary_tol: float = STATIONARY_TOL):
    """Optimal values and policy for the product's mode."""
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    V = product.initial_values()
    values, policies = [V], []
    tail = None
    for n in range(horizon):
        Q = product.update(product.contract(V))
        if product.mode is Mode.ROBUST:
            pol = Q.argmax(axis=1)
            V_next = Q.max(axis=1)
        else:
            pol = Q.argmin(axis=1)
            V_next = Q.min(axis=1)
        V_next = product.pin(V_next)
        _check_bounds(V_next, n + 1)
        policies.append(pol)
        if np.max(np.abs(V_next - V)) <= stationary_tol:
            # the recursion has converged: every later slice repeats this one
            tail = n
            log.info("values stationary after %d of %d steps", n, horizon)
            break
        values.append(V_next)
        V = V_next
    return ValueTable(values, horizon, product.mode, tail), PolicyTable(policies, horizon)


def synthesize_robust(product: Product, horizon: int, **kw):
    if product.mode is not Mode.ROBUST:
        raise ConfigError("product is not in robust mode")
    return synthesize(product, horizon, **kw)


def synthesize_worst(product: Product, horizon: int, **kw):
    if product.mode is not Mode.WORST:
        raise ConfigError("product is not in worst mode")
    return synthesize(product, horizon, **kw)


def evaluate_policy(product: Product, policy: PolicyTable, horizon: int | None = None) -> ValueTable:
    """Values of a fixed Markov policy (no tail compression)."""
    H = policy.horizon if horizon is None else horizon
    if H > policy.horizon:
        raise ConfigError("policy does not cover the requested horizon")
    V = product.initial_values()
    values = [V]
    rows = np.arange(product.n_states)[:, None]
    cols = np.arange(product.n_dfa)[None, :]
    for n in range(H):
        pol = np.asarray(policy.by_togo(policy.horizon - H + n))
        if pol.shape != (product.n_states, product.n_dfa):
            raise ConfigError(f"policy slice {n} has shape {pol.shape}")
        if pol.min() < 0 or pol.max() >= product.n_inputs:
            raise ConfigError(f"policy slice {n} references unknown inputs")
        Q = product.update(product.contract(V))
        V = product.pin(Q[rows, pol, cols])
        _check_bounds(V, n + 1)
        values.append(V)
    return ValueTable(values, H, product.mode)


evaluate_policy_robust = evaluate_policy
evaluate_policy_worst = evaluate_policy


def brute_force_values(product: Product, horizon: int, guard: int = BRUTE_FORCE_GUARD) -> np.ndarray:
    """Optimal values at time-to-go ``horizon`` by plain recursion, without reusing results.

    Exponential in the horizon; refuses instances whose path count exceeds ``guard``.
    """
    T = product.dense_kernel()
    S, U, nq = T.shape[0], T.shape[1], product.n_dfa
    branching = U * S * nq
    if branching ** horizon > guard:
        raise ConfigError(f"brute force would explore {branching ** horizon} paths (guard {guard})")
    robust = product.mode is Mode.ROBUST
    d = product.delta

    def value(n, x, q):
        if product.accepting[q]:
            return 1.0
        if product.pinned[x]:
            return product.pinned_value
        if n == 0:
            return 0.0
        best = None
        for u in range(U):
            total = 0.0
            for x2 in range(S):
                p = T[x, u, x2]
                if p == 0.0:
                    continue
                options = [value(n - 1, x2, q2) for q2 in range(nq) if product.succ[x2, q, q2]]
                total += p * (min(options) if robust else max(options))
            total = (1.0 - d) * total + (0.0 if robust else d)
            if best is None or (total > best if robust else total < best):
                best = total
        return best

    return np.array([[value(horizon, x, q) for q in range(nq)] for x in range(S)])


def guarantee_grid(values: ValueTable, product_or_mode, automaton: SafetyAutomaton, labels: LabellingFunction,
                   abs_: FiniteAbstraction) -> np.ndarray:
    """Advisor violation bound for every initial grid cell, shaped like the grid."""
    mode = product_or_mode.mode if isinstance(product_or_mode, Product) else Mode(product_or_mode)
    ys = abs_.output(abs_.grid.centers)
    q0 = automaton.table[automaton.initial, labels.label_index(ys)]
    V = values.final[np.arange(abs_.grid.n_cells), q0]
    bound = V if mode is Mode.WORST else 1.0 - V
    return bound.reshape(tuple(abs_.grid.counts))


def export_grid_csv(grid_values: np.ndarray, abs_: FiniteAbstraction, path) -> Path:
    path = Path(path)
    centers = abs_.grid.centers
    flat = np.asarray(grid_values).reshape(-1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{d}" for d in range(centers.shape[1])] + ["bound"])
        for c, b in zip(centers, flat):
            w.writerow([repr(float(v)) for v in c] + [repr(float(b))])
    return path
