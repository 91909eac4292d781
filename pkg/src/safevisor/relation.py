"""Ellipsoidal (eps, delta) relation between plant and abstraction.

Membership is ``(x - P xh)' M (x - P xh) <= eps**2``.  Plant and
abstraction share the same noise sample each step, so the relation can be
checked one step ahead in closed form (the feasible-input test) and the
only slack comes from the noise mismatch ``R - P Rh`` and the quantization
error of the abstract state.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .abstraction import FiniteAbstraction, GridPartition
from .errors import ConfigError, ContractError
from .model import SystemModel
from .spec import LabellingFunction, SafetyAutomaton

log = logging.getLogger(__name__)


class InterfaceForm(str, Enum):
    LINEAR = "linear"  # u = K (x - P xh) + D xh + Rt uh
    SLOPE = "slope"  # u = (K + b L)(x - xh) + uh + G exp(F xh)


def noise_radius(delta: float, dim: int = 1) -> float:
    """Half-width of a noise box holding probability at least ``1 - delta``.

    Uses the radius of the chi-square ball, sqrt(chi2_p^{-1}(1 - delta)),
    which the enclosing box only enlarges.
    """
    if delta <= 0:
        return np.inf
    return float(np.sqrt(stats.chi2.ppf(1.0 - delta, dim)))


def exp_divided_difference(a, b):
    """(exp(a) - exp(b)) / (a - b), with the limit exp(b) when |a - b| < 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    small = np.abs(d) < 1e-12
    safe = np.where(small, 1.0, d)
    return np.where(small, np.exp(b), np.expm1(d) * np.exp(b) / safe)


@dataclass
class ProbRelation:
    """Relation parameters plus the interface function that refines abstract inputs."""

    M: np.ndarray
    P: np.ndarray
    eps: float
    delta: float
    form: InterfaceForm
    K: np.ndarray
    D: np.ndarray | None = None
    Rt: np.ndarray | None = None
    L: np.ndarray | None = None
    G: np.ndarray | None = None
    gamma: float = float("nan")
    M_pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=np.float64))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        self.form = InterfaceForm(self.form)
        s = self.M.shape[0]
        if self.M.shape != (s, s):
            raise ConfigError("relation.M must be square")
        if not np.allclose(self.M, self.M.T, atol=1e-12):
            raise ConfigError("relation.M must be symmetric")
        eig = np.linalg.eigvalsh(self.M)
        if eig.min() < -1e-9 * max(1.0, eig.max()):
            raise ConfigError("relation.M must be positive semidefinite")
        if self.P.shape[0] != s:
            raise ConfigError("relation.P has the wrong number of rows")
        if not self.eps > 0:
            raise ConfigError("relation.epsilon must be positive")
        if not 0 <= self.delta < 1:
            raise ConfigError("relation.delta must lie in [0, 1)")
        self.K = np.atleast_2d(np.asarray(self.K, dtype=np.float64))
        if self.K.shape[1] != s:
            raise ConfigError("interface.K has the wrong number of columns")
        if self.form is InterfaceForm.LINEAR:
            if self.D is None or self.Rt is None:
                raise ConfigError("linear interface needs D and R")
            self.D = np.atleast_2d(np.asarray(self.D, dtype=np.float64))
            self.Rt = np.atleast_2d(np.asarray(self.Rt, dtype=np.float64))
        else:
            if self.L is None or self.G is None:
                raise ConfigError("slope interface needs L and G")
            self.L = np.atleast_2d(np.asarray(self.L, dtype=np.float64))
            self.G = np.asarray(self.G, dtype=np.float64).reshape(-1, 1)
            if not np.allclose(self.P, np.eye(s)):
                raise ConfigError("slope interface requires P = identity")
        self.M_pinv = np.linalg.pinv(self.M)

    @property
    def reduced_dim(self) -> int:
        return self.P.shape[1]

    def error(self, x, xh) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) - np.asarray(xh, dtype=np.float64) @ self.P.T

    def mnorm(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", v, self.M, v), 0.0))

    def ellipsoid_support(self, row) -> float:
        """max of row . e over e' M e <= eps^2 (infinite if row leaves the range of M)."""
        row = np.asarray(row, dtype=np.float64).reshape(-1)
        resid = row - self.M @ (self.M_pinv @ row)
        if np.linalg.norm(resid) > 1e-9 * max(1.0, np.linalg.norm(row)):
            return np.inf
        return float(self.eps * np.sqrt(max(row @ self.M_pinv @ row, 0.0)))


def in_relation(rel: ProbRelation, x, xh, slack: float = 0.0) -> np.ndarray:
    """Membership test for a pair or a batch of pairs."""
    e = rel.error(x, xh)
    q = np.einsum("...i,ij,...j->...", e, rel.M, e)
    return q <= rel.eps**2 + slack


def relation_value(rel: ProbRelation, x, xh) -> np.ndarray:
    e = rel.error(x, xh)
    return np.einsum("...i,ij,...j->...", e, rel.M, e)


def _refine(rel: ProbRelation, model: SystemModel, x, xh, uh) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    xh = np.asarray(xh, dtype=np.float64)
    uh = np.asarray(uh, dtype=np.float64)
    if rel.form is InterfaceForm.LINEAR:
        return rel.error(x, xh) @ rel.K.T + xh @ rel.D.T + uh @ rel.Rt.T
    if model.F is None:
        raise ConfigError("slope interface needs the plant exponential term")
    fx = (x @ model.F.T)[..., 0]
    fxh = (xh @ model.F.T)[..., 0]
    b = exp_divided_difference(fx, fxh)[..., None]
    e = x - xh
    gain = e @ rel.K.T + b * (e @ rel.L.T)
    return gain + uh + np.exp(fxh)[..., None] * rel.G[:, 0]


def refine_input(rel: ProbRelation, model: SystemModel, x, xh, uh, clip: bool = False) -> np.ndarray:
    """Concrete input for abstract input ``uh`` at the pair (x, xh).

    Raises :class:`ContractError` when the result leaves the plant's input
    box, unless ``clip`` is set, in which case it is saturated.
    """
    u = _refine(rel, model, x, xh, uh)
    lo, hi = model.input_bounds[:, 0], model.input_bounds[:, 1]
    if clip:
        return np.clip(u, lo, hi)
    if np.any(u < lo - model.bound_tol) or np.any(u > hi + model.bound_tol):
        raise ContractError(f"refined input {u} outside plant bounds; restricted abstract input set is too large")
    return u


def refined_input_range(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction, uh) -> np.ndarray:
    """Bounds (m, 2) on the refined input over all related pairs with grid representatives."""
    uh = np.asarray(uh, dtype=np.float64).reshape(-1)
    xs = abs_.grid.centers
    m = model.n_inputs
    out = np.empty((m, 2))
    if rel.form is InterfaceForm.LINEAR:
        base = xs @ rel.D.T + uh @ rel.Rt.T
        for i in range(m):
            w = rel.ellipsoid_support(rel.K[i])
            out[i] = base[:, i].min() - w, base[:, i].max() + w
        return out
    fmax = rel.ellipsoid_support(model.F[0])
    fxh = xs @ model.F[0]
    b_lo, b_hi = np.exp(fxh - fmax), np.exp(fxh + fmax)
    base = uh + np.exp(fxh)[:, None] * rel.G[:, 0]
    for i in range(m):
        w = np.maximum(
            [rel.ellipsoid_support(rel.K[i] + b * rel.L[i]) for b in b_lo],
            [rel.ellipsoid_support(rel.K[i] + b * rel.L[i]) for b in b_hi],
        )
        out[i] = (base[:, i] - w).min(), (base[:, i] + w).max()
    return out


def admissible_inputs(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction, candidates) -> np.ndarray:
    """Mask of candidate abstract inputs whose refinement always respects the plant bounds."""
    lo, hi = model.input_bounds[:, 0], model.input_bounds[:, 1]
    mask = []
    for uh in np.atleast_2d(candidates):
        r = refined_input_range(rel, model, abs_, uh)
        mask.append(bool(np.all(r[:, 0] >= lo - 1e-12) and np.all(r[:, 1] <= hi + 1e-12)))
    return np.array(mask)


def compute_gamma(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction) -> float:
    """Worst M-norm of the noise mismatch plus quantization error over a box of vertices.

    The maximand is convex in (noise, quantization error), so it suffices to
    enumerate the vertices of the noise box (half-width from
    :func:`noise_radius`) and of the half-cell quantization box.
    """
    mismatch = model.R - rel.P @ abs_.R
    if np.allclose(mismatch, 0.0, atol=1e-15):
        noise_vertices = np.zeros((1, model.n_noise))
    else:
        r = noise_radius(rel.delta, model.n_noise)
        if not np.isfinite(r):
            return np.inf
        noise_vertices = r * np.array(list(itertools.product((-1.0, 1.0), repeat=model.n_noise)))
    half = 0.5 * abs_.grid.widths
    quant_vertices = half * np.array(list(itertools.product((-1.0, 1.0), repeat=abs_.grid.dim)))
    v = (noise_vertices @ mismatch.T)[:, None, :] + (quant_vertices @ rel.P.T)[None, :, :]
    return float(rel.mnorm(v).max())


def input_offsets(rel: ProbRelation, abs_: FiniteAbstraction) -> np.ndarray:
    """``P Bh uh`` for every abstract input, shape (U, s)."""
    return abs_.inputs @ abs_.B.T @ rel.P.T


def feasible_mask(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction, x, xh, u_uc) -> np.ndarray:
    """Boolean mask over abstract inputs that keep the relation one step ahead.

    ``x``, ``xh`` (continuous representative) and ``u_uc`` may carry a
    leading batch dimension; the result then has shape (batch, U).
    """
    x = np.asarray(x, dtype=np.float64)
    phi = model.drift(x) + np.asarray(u_uc, dtype=np.float64) @ model.B.T - abs_.drift(xh) @ rel.P.T
    diff = phi[..., None, :] - input_offsets(rel, abs_)
    return rel.mnorm(diff) <= rel.eps - rel.gamma


def feasible_inputs(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction, x, xh, u_uc) -> list:
    """Indices of abstract inputs passing the one-step relation test."""
    return np.flatnonzero(feasible_mask(rel, model, abs_, x, xh, u_uc)).tolist()


# --- eps-ball label geometry -----------------------------------------------

def output_box(abs_: FiniteAbstraction):
    """Output-space image of the gridded box; needs at most one nonzero per row of C."""
    C = abs_.C
    if np.any(np.count_nonzero(C, axis=1) > 1):
        raise ConfigError("abstraction.C must map the grid box onto a box (one nonzero per row)")
    a = C @ abs_.grid.lower
    b = C @ abs_.grid.upper
    return np.minimum(a, b), np.maximum(a, b)


def letters_near_states(L: LabellingFunction, abs_: FiniteAbstraction, eps: float) -> np.ndarray:
    """Mask (n_states, n_letters): letters reachable within ``eps`` of each state's output."""
    n = abs_.grid.n_cells
    out = np.zeros((n + 1, len(L.letters)), bool)
    ys = abs_.output(abs_.grid.centers)
    for i, (_, boxes) in enumerate(L.regions):
        for b in boxes:
            out[:n, i] |= b.meets_ball(ys, eps)
    if L.default is not None:
        inside = np.zeros(n, bool)
        for _, boxes in L.regions:
            for b in boxes:
                inside |= b.inside_ball_complement(ys, eps)
        out[:n, -1] = ~inside
    lo, hi = output_box(abs_)
    out[n] = L.letters_outside_box(lo, hi)
    return out


def successor_sets(A: SafetyAutomaton, L: LabellingFunction, abs_: FiniteAbstraction, eps: float) -> np.ndarray:
    """``S[x, q, q2]`` is True when ``q2`` lies in the eps-successor set of ``q`` at state ``x``."""
    near = letters_near_states(L, abs_, eps)
    nq = A.n_states
    S = np.zeros((abs_.n_states, nq, nq), bool)
    for a in range(len(A.letters)):
        dest = A.table[:, a]
        hit = near[:, a]
        for q in range(nq):
            S[hit, q, dest[q]] = True
    return S


def q_eps_set(xh_index: int, q: int, A: SafetyAutomaton, L: LabellingFunction, abs_: FiniteAbstraction,
              eps: float) -> list:
    return np.flatnonzero(successor_sets(A, L, abs_, eps)[xh_index, q]).tolist()


def outside_masks(S: np.ndarray, accepting: np.ndarray):
    """Per-DFA-state masks over abstract states from successor sets.

    Returns ``(some, every)``, each of shape (nq, n_states): ``some[q, x]``
    holds when at least one eps-successor of ``q`` at ``x`` is outside the
    accepting set, ``every[q, x]`` when all of them are.
    """
    out = ~accepting
    some = np.any(S & out[None, None, :], axis=2).T
    every = np.all(~S | out[None, None, :], axis=2).T
    return some, every


def x_eps_set(q: int, A: SafetyAutomaton, L: LabellingFunction, abs_: FiniteAbstraction, eps: float) -> list:
    some, _ = outside_masks(successor_sets(A, L, abs_, eps), A.accepting)
    return np.flatnonzero(some[q]).tolist()


def x_neg_eps_set(q: int, A: SafetyAutomaton, L: LabellingFunction, abs_: FiniteAbstraction, eps: float) -> list:
    _, every = outside_masks(successor_sets(A, L, abs_, eps), A.accepting)
    return np.flatnonzero(every[q]).tolist()


def output_gain(rel: ProbRelation, model: SystemModel, abs_: FiniteAbstraction) -> float:
    """Largest ``|h(x) - hh(xh)| / eps`` over related pairs; at most 1 for output closeness.

    Requires ``C P = Ch``; returns ``inf`` otherwise or when C sees the null
    space of M.
    """
    if not np.allclose(model.C @ rel.P, abs_.C, atol=1e-9):
        return np.inf
    if not all(np.isfinite(rel.ellipsoid_support(row)) for row in model.C):
        return np.inf
    w, V = np.linalg.eigh(rel.M_pinv)
    root = V @ np.diag(np.sqrt(np.maximum(w, 0.0))) @ V.T
    return float(np.linalg.norm(model.C @ root, 2))
