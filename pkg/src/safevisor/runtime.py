"""Online supervision: advisor, history-based supervisor and the control loop.

At every step the advisor proposes a safe input and the supervisor decides
whether the unverified controller's input may be applied instead.  A
candidate passes if (1) some abstract input keeps the relation one step
ahead and (2) the estimated end-to-end violation probability ``E_pv``
stays within the tolerance ``eta``.

Two implementations share the same arithmetic.  :class:`Safevisor` runs a
single trajectory and evaluates every decision directly from the value
table and kernel rows; it is the reference and is used for latency
measurements.  :func:`simulate_batch` advances many independent runs in
lockstep using precomputed contraction tables.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .abstraction import FiniteAbstraction, locate
from .errors import ConfigError
from .model import NOISE_STREAM, SystemModel, output, recover_noise, run_stream, step
from .relation import ProbRelation, feasible_mask, in_relation, refine_input
from .spec import LabellingFunction, Mode, SafetyAutomaton
from .synthesis import PolicyTable, Product, ValueTable

log = logging.getLogger(__name__)

#: Slack for the assertion that E_pv stays inside [0, 1].
EPV_TOL = 1e-12
#: Candidates this close to the best E_pv count as ties (lowest index wins).
TIE_TOL = 1e-12


@dataclass
class Architecture:
    """Immutable pieces shared by every run: plant, abstraction, relation, tables."""

    model: SystemModel
    abstraction: FiniteAbstraction
    relation: ProbRelation
    automaton: SafetyAutomaton
    labels: LabellingFunction
    product: Product
    values: ValueTable
    policy: PolicyTable
    horizon: int
    eta: float
    sink_input: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.horizon > self.policy.horizon:
            raise ConfigError("policy is shorter than the horizon")
        if not 0 <= self.eta <= 1:
            raise ConfigError("eta must lie in [0, 1]")
        if self.sink_input is None:
            self.sink_input = self.model.input_bounds.mean(axis=1)
        self.sink_input = np.asarray(self.sink_input, dtype=np.float64).reshape(self.model.n_inputs)
        p = self.product
        # abstract states counted by the history product, per DFA state
        self.history_mask = p.outside_some if self.mode is Mode.ROBUST else p.outside_every
        self.history_weights = np.asarray(p.kernel @ self.history_mask.T.astype(float))
        self.U = p.n_inputs

    @property
    def mode(self) -> Mode:
        return self.product.mode

    @property
    def delta(self) -> float:
        return self.product.delta

    def value_slice(self, n: int) -> np.ndarray:
        return self.values[n]

    def resolved(self, n: int) -> np.ndarray:
        """Successor-resolved values (S, nq) at time-to-go ``n``, cached by slice."""
        key = ("G", min(n, len(self.values.slices) - 1))
        if key not in self._cache:
            self._trim()
            self._cache[key] = self.product.resolve(self.values[n])
        return self._cache[key]

    def contraction(self, n: int) -> np.ndarray:
        """(S*U, nq) table of sum over successors of resolved values times the kernel."""
        key = ("C", min(n, len(self.values.slices) - 1))
        if key not in self._cache:
            self._trim()
            self._cache[key] = np.asarray(self.product.kernel @ self.resolved(n))
        return self._cache[key]

    def _trim(self):
        # keep the stationary slice plus the most recent ones
        last = len(self.values.slices) - 1
        if len(self._cache) > 6:
            for key in [k for k in self._cache if k[1] != last][:-2]:
                del self._cache[key]

    def initial_q(self, x0) -> int:
        y = output(self.model, x0)
        return int(self.automaton.table[self.automaton.initial, self.labels.label_index(y)])

    def epv(self, running_product, running_sum, part2):
        """Supervisor estimate from accumulators and the one-step contraction."""
        d = self.delta
        if self.mode is Mode.ROBUST:
            return running_product * (1.0 - d) * (1.0 - part2) + d + running_sum
        return 1.0 - running_product * (1.0 - d) * (1.0 - part2)


# --- reference single-run implementation -------------------------------------

@dataclass
class AdvisorMemory:
    x: np.ndarray
    xh: int
    q: int
    k: int = 0


@dataclass
class SupervisorState:
    mode: Mode
    running_product: float = 1.0
    running_sum: float = 0.0
    history: list = field(default_factory=list)
    decision_log: list = field(default_factory=list)


@dataclass
class Decision:
    accepted: bool
    epv: float | None
    uh: int
    feasible: list
    latency_ns: int = 0
    candidate: int | None = None


def advisor_input(arch: Architecture, mem: AdvisorMemory):
    """(concrete input, abstract input index) proposed by the advisor."""
    if mem.k >= arch.horizon:
        raise ConfigError(f"time index {mem.k} beyond horizon {arch.horizon}")
    abs_ = arch.abstraction
    uh = int(arch.policy.at(mem.k)[mem.xh, mem.q])
    if mem.xh == abs_.sink:
        log.debug("advisor at sink state, applying fallback input")
        return arch.sink_input.copy(), uh
    rep = abs_.representative(mem.xh)
    if not in_relation(arch.relation, mem.x, rep, slack=1e-9):
        log.debug("relation breach at k=%d", mem.k)
    u = refine_input(arch.relation, arch.model, mem.x, rep, abs_.inputs[uh], clip=True)
    return u, uh


def advisor_step(arch: Architecture, mem: AdvisorMemory, x, noise, u_prev=None, uh_prev=None):
    """Advance the advisor memory to the measured state ``x`` and query it.

    For ``k > 0`` the abstract state is moved with the previous abstract
    input and the noise sample of the previous step; pass ``noise=None`` to
    recover that sample from the measurements by least squares.
    """
    x = np.asarray(x, dtype=np.float64)
    if mem.k > 0:
        if noise is None:
            noise = recover_noise(arch.model, mem.x, u_prev, x)
        mem.xh = abstract_successor(arch, mem.xh, uh_prev, noise)
        letter = arch.labels.label_index(output(arch.model, x))
        mem.q = int(arch.automaton.table[mem.q, letter])
    mem.x = x
    return advisor_input(arch, mem)


def abstract_successor(arch: Architecture, xh: int, uh: int, noise) -> int:
    abs_ = arch.abstraction
    if xh == abs_.sink:
        return abs_.sink
    nxt = abs_.mean(abs_.representative(xh), abs_.inputs[uh]) + np.asarray(noise) @ abs_.R.T
    return int(locate(abs_.grid, nxt))


def _part2_direct(arch: Architecture, xh: int, q: int, candidates, n: int) -> np.ndarray:
    """Sum over every abstract state of the successor-resolved value times the kernel row."""
    p = arch.product
    V = arch.values[n]
    robust = arch.mode is Mode.ROBUST
    masked = np.where(p.succ[:, q, :], V, np.inf if robust else -np.inf)
    G = masked.min(axis=1) if robust else masked.max(axis=1)
    K = p.kernel
    rows = np.zeros((len(candidates), p.n_states))
    for i, u in enumerate(candidates):
        r = xh * p.n_inputs + u
        lo, hi = K.indptr[r], K.indptr[r + 1]
        rows[i, K.indices[lo:hi]] = K.data[lo:hi]
    return rows @ G


def _tie_break(e: np.ndarray) -> np.ndarray:
    """Row-wise lowest index whose value is within ``TIE_TOL`` of the row maximum.

    Makes the choice insensitive to summation order, so the batch and
    single-run engines select the same input.
    """
    top = e.max(axis=1, keepdims=True)
    return np.argmax(e >= top - TIE_TOL, axis=1)


def _history_term(arch: Architecture, xh: int, q: int, uh: int) -> float:
    K = arch.product.kernel
    r = xh * arch.U + uh
    lo, hi = K.indptr[r], K.indptr[r + 1]
    mass = K.data[lo:hi][arch.history_mask[q, K.indices[lo:hi]]].sum()
    return (1.0 - arch.delta) * float(mass)


def supervise(arch: Architecture, sup: SupervisorState, x, xh: int, q: int, u_uc, k: int,
              uh_advisor: int) -> Decision:
    """Accept or reject ``u_uc`` at time ``k`` and update the history accumulators."""
    if k >= arch.horizon:
        raise ConfigError(f"time index {k} beyond horizon {arch.horizon}")
    abs_ = arch.abstraction
    feas = []
    if xh != abs_.sink:
        mask = feasible_mask(arch.relation, arch.model, abs_, x, abs_.representative(xh), u_uc)
        feas = np.flatnonzero(mask).tolist()
    epv, uh, cand = None, uh_advisor, None
    accepted = False
    if feas:
        part2 = _part2_direct(arch, xh, q, feas, arch.horizon - k - 1)
        e = arch.epv(sup.running_product, sup.running_sum, part2)
        best = _tie_break(e[None, :])[0]
        epv = float(e[best])
        cand = feas[best]
        if not -EPV_TOL <= epv <= 1.0 + EPV_TOL:
            raise FloatingPointError(f"E_pv = {epv} outside [0, 1]")
        if epv <= arch.eta:
            accepted, uh = True, feas[best]
    term = _history_term(arch, xh, q, uh)
    sup.running_product *= term
    if arch.mode is Mode.ROBUST:
        sup.running_sum += arch.delta * sup.running_product
    sup.history.append((xh, q, uh))
    return Decision(accepted, epv, uh, feas, candidate=cand)


def supervise_robust(arch, sup, x, xh, q, u_uc, k, uh_advisor) -> Decision:
    if arch.mode is not Mode.ROBUST:
        raise ConfigError("architecture is not in robust mode")
    return supervise(arch, sup, x, xh, q, u_uc, k, uh_advisor)


def supervise_worst(arch, sup, x, xh, q, u_uc, k, uh_advisor) -> Decision:
    if arch.mode is not Mode.WORST:
        raise ConfigError("architecture is not in worst mode")
    return supervise(arch, sup, x, xh, q, u_uc, k, uh_advisor)


class Safevisor:
    """Single-run control loop: measurement update, advisor, supervisor, actuation.

    ``supervisor=False`` applies the unverified input unconditionally and
    ``advisor_only=True`` rejects every unverified input.
    """

    def __init__(self, arch: Architecture, x0, xh0: int | None = None, supervisor: bool = True,
                 advisor_only: bool = False):
        self.arch = arch
        self.supervisor = supervisor
        self.advisor_only = advisor_only
        x0 = np.asarray(x0, dtype=np.float64)
        xh0 = arch.abstraction.initial_index() if xh0 is None else int(xh0)
        self.mem = AdvisorMemory(x=x0, xh=xh0, q=arch.initial_q(x0))
        self.sup = SupervisorState(mode=arch.mode)
        self._u_prev = None
        self._uh_prev = None

    @property
    def q(self) -> int:
        return self.mem.q

    def step(self, x, u_uc, noise_prev=None) -> np.ndarray:
        """Input to apply at the current time for measured state ``x``.

        ``noise_prev`` is the noise that produced ``x`` from the previous
        state; omit it to recover it from the measurements.
        """
        arch, mem = self.arch, self.mem
        u_safe, uh_adv = advisor_step(arch, mem, x, noise_prev, self._u_prev, self._uh_prev)
        u_uc = np.asarray(u_uc, dtype=np.float64).reshape(arch.model.n_inputs)
        t0 = time.perf_counter_ns()
        if self.supervisor and not self.advisor_only:
            dec = supervise(arch, self.sup, mem.x, mem.xh, mem.q, u_uc, mem.k, uh_adv)
        else:
            dec = Decision(not self.advisor_only, None, uh_adv, [])
            if self.advisor_only:
                supervise_bookkeeping(arch, self.sup, mem.xh, mem.q, uh_adv)
        latency = time.perf_counter_ns() - t0
        dec.latency_ns = latency
        u = u_uc if dec.accepted else u_safe
        self.sup.decision_log.append({
            "k": mem.k, "accepted": dec.accepted, "epv": dec.epv, "candidate": dec.candidate, "u": u.copy(),
            "x": mem.x.copy(), "xh": mem.xh, "q": mem.q, "latency_ns": latency,
        })
        self._u_prev, self._uh_prev = u, dec.uh
        mem.k += 1
        return u


def supervise_bookkeeping(arch: Architecture, sup: SupervisorState, xh: int, q: int, uh: int):
    """Accumulator update for a step whose unverified input was not examined."""
    sup.running_product *= _history_term(arch, xh, q, uh)
    if arch.mode is Mode.ROBUST:
        sup.running_sum += arch.delta * sup.running_product
    sup.history.append((xh, q, uh))


def run_single(arch: Architecture, controller, seed: int, run: int, supervisor: bool = True,
               advisor_only: bool = False, steps: int | None = None):
    """One trajectory through :class:`Safevisor`; returns (states, inputs, visor).

    ``steps`` truncates the run (the tables still refer to the full horizon).
    """
    model = arch.model
    steps = arch.horizon if steps is None else min(int(steps), arch.horizon)
    noise = run_stream(seed, run, NOISE_STREAM).standard_normal((arch.horizon, model.n_noise))
    controller.reset(np.array([run]), seed, arch.horizon)
    x = model.x0.copy()
    visor = Safevisor(arch, x, supervisor=supervisor, advisor_only=advisor_only)
    xs, us = [x], []
    w_prev = None
    for k in range(steps):
        u_uc = controller(k, x[None, :])[0]
        u = visor.step(x, u_uc, w_prev)
        w_prev = noise[k]
        x = step(model, x, u, w_prev)
        xs.append(x)
        us.append(u)
    visor.mem.q = int(arch.automaton.table[visor.mem.q, arch.labels.label_index(output(model, x))])
    return np.array(xs), np.array(us), visor


# --- batched engine ----------------------------------------------------------

@dataclass
class BatchResult:
    runs: np.ndarray
    final_q: np.ndarray
    accepted_steps: np.ndarray
    breaches: np.ndarray
    trace: dict | None = None

    def satisfied(self, automaton: SafetyAutomaton) -> np.ndarray:
        reached = automaton.accepting[self.final_q]
        return reached if automaton.mode is Mode.ROBUST else ~reached


def simulate_batch(arch: Architecture, controller, runs, seed: int, supervisor: bool = True,
                   advisor_only: bool = False, record: bool = False) -> BatchResult:
    """Advance independent runs in lockstep; run ``r`` uses noise stream ``(seed, r)``."""
    model, abs_, rel = arch.model, arch.abstraction, arch.relation
    runs = np.asarray(runs, dtype=np.int64)
    B, H, U = len(runs), arch.horizon, arch.U
    noise = np.stack([run_stream(seed, r, NOISE_STREAM).standard_normal((H, model.n_noise)) for r in runs])
    controller.reset(runs, seed, H)
    table = arch.automaton.table
    x = np.tile(model.x0, (B, 1))
    xh = np.full(B, abs_.initial_index(), dtype=np.int64)
    q = np.full(B, arch.initial_q(model.x0), dtype=np.int64)
    prod = np.ones(B)
    rsum = np.zeros(B)
    n_acc = np.zeros(B, dtype=np.int64)
    breaches = np.zeros(B, dtype=np.int64)
    examine = supervisor and not advisor_only
    robust = arch.mode is Mode.ROBUST
    d = arch.delta
    uidx = np.arange(U)
    if record:
        trace = {key: np.zeros((B, H), dtype=dt) for key, dt in
                 (("xh", np.int64), ("q", np.int64), ("uh", np.int64), ("accepted", bool),
                  ("epv", np.float64), ("feasible", bool))}
        trace["x"] = np.zeros((B, H + 1, model.n_states))
        trace["x"][:, 0] = x
    for k in range(H):
        n = H - k - 1
        at_sink = xh == abs_.sink
        rep = abs_.representative(xh)
        uh_adv = arch.policy.at(k)[xh, q]
        u_safe = np.tile(arch.sink_input, (B, 1))
        live = ~at_sink
        if live.any():
            u_safe[live] = refine_input(rel, model, x[live], rep[live], abs_.inputs[uh_adv[live]], clip=True)
            breaches += live & ~in_relation(rel, x, np.where(live[:, None], rep, 0.0), slack=1e-9)
        u_uc = controller(k, x)
        uh_used = uh_adv.copy()
        epv = np.full(B, np.nan)
        feas_any = np.zeros(B, bool)
        if examine:
            with np.errstate(invalid="ignore"):
                feas = feasible_mask(rel, model, abs_, x, rep, u_uc)
            feas &= live[:, None]
            feas_any = feas.any(axis=1)
            part2 = arch.contraction(n)[xh[:, None] * U + uidx, q[:, None]]
            e = arch.epv(prod[:, None], rsum[:, None], part2)
            e = np.where(feas, e, -np.inf)
            best = _tie_break(e)
            e_best = e[np.arange(B), best]
            if np.any(feas_any & ((e_best < -EPV_TOL) | (e_best > 1.0 + EPV_TOL))):
                raise FloatingPointError("E_pv outside [0, 1]")
            accept = feas_any & (e_best <= arch.eta)
            epv = np.where(feas_any, e_best, np.nan)
            uh_used = np.where(accept, best, uh_adv)
        elif not supervisor:
            accept = np.ones(B, bool)
        else:
            accept = np.zeros(B, bool)
        if supervisor:
            term = (1.0 - d) * arch.history_weights[xh * U + uh_used, q]
            prod = prod * term
            if robust:
                rsum = rsum + d * prod
        if record:
            trace["xh"][:, k], trace["q"][:, k], trace["uh"][:, k] = xh, q, uh_used
            trace["accepted"][:, k], trace["epv"][:, k], trace["feasible"][:, k] = accept, epv, feas_any
        n_acc += accept
        u = np.where(accept[:, None], u_uc, u_safe)
        w = noise[:, k]
        x = step(model, x, u, w)
        if supervisor:
            mean = abs_.mean(np.where(live[:, None], rep, 0.0), abs_.inputs[uh_used]) + w @ abs_.R.T
            xh = np.where(at_sink, abs_.sink, locate(abs_.grid, mean))
        q = table[q, arch.labels.label_index(output(model, x))]
        if record:
            trace["x"][:, k + 1] = x
    return BatchResult(runs, q, n_acc, breaches, trace if record else None)


def epv_from_history(arch: Architecture, history, k: int, uh: int) -> float:
    """E_pv at time ``k`` for candidate ``uh``, recomputed from the full history.

    ``history`` lists the (abstract state, DFA state, abstract input) triples
    for times ``0..k``; the last triple supplies the current (xh, q).  Every
    sum runs over the whole abstract state space with explicit loops.
    """
    p = arch.product
    T = p.kernel
    d = arch.delta
    robust = arch.mode is Mode.ROBUST
    mask = arch.history_mask

    def mass(xh, q, u):
        row = T.getrow(xh * p.n_inputs + u).toarray().ravel()
        return sum(row[x2] for x2 in range(p.n_states) if mask[q, x2])

    factors = [(1.0 - d) * mass(*history[z]) for z in range(k)]
    xh, q, _ = history[k]
    V = arch.values[arch.horizon - k - 1]
    row = T.getrow(xh * p.n_inputs + uh).toarray().ravel()
    part2 = 0.0
    for x2 in range(p.n_states):
        opts = [V[x2, q2] for q2 in range(p.n_dfa) if p.succ[x2, q, q2]]
        part2 += (min(opts) if robust else max(opts)) * row[x2]
    prod = float(np.prod(factors)) if factors else 1.0
    if robust:
        part3 = d + sum(d * float(np.prod(factors[:j])) for j in range(1, k + 1))
        return prod * (1.0 - d) * (1.0 - part2) + part3
    return 1.0 - prod * (1.0 - d) * (1.0 - part2)
