"""DFA specifications over box-labelled output spaces."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


class Mode(str, Enum):
    """What reaching the accepting set means."""

    ROBUST = "robust"  # accepting states mark a satisfied (good) prefix
    WORST = "worst"  # accepting states mark a violating (bad) prefix


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with per-side inclusivity; bounds may be infinite."""

    lower: np.ndarray
    upper: np.ndarray
    lower_closed: np.ndarray
    upper_closed: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        lc = np.broadcast_to(np.asarray(self.lower_closed, dtype=bool), lo.shape).copy()
        uc = np.broadcast_to(np.asarray(self.upper_closed, dtype=bool), lo.shape).copy()
        if hi.shape != lo.shape:
            raise ConfigError("box bounds have different lengths")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ConfigError("box bounds must not be NaN")
        # infinite sides are never attained
        lc &= np.isfinite(lo)
        uc &= np.isfinite(hi)
        for name, v in (("lower", lo), ("upper", hi), ("lower_closed", lc), ("upper_closed", uc)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @classmethod
    def closed(cls, lower, upper):
        lo = np.asarray(lower, dtype=np.float64).reshape(-1)
        return cls(lo, upper, np.ones(lo.shape, bool), np.ones(lo.shape, bool))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def is_empty(self) -> bool:
        lo, hi = self.lower, self.upper
        degenerate = (lo == hi) & ~(self.lower_closed & self.upper_closed)
        return bool(np.any(lo > hi) or np.any(degenerate))

    def contains(self, y) -> np.ndarray:
        """Membership for a point (d,) or a batch (N, d)."""
        y = np.asarray(y, dtype=np.float64)
        above = np.where(self.lower_closed, y >= self.lower, y > self.lower)
        below = np.where(self.upper_closed, y <= self.upper, y < self.upper)
        return np.all(above & below, axis=-1)

    def closest_point(self, c) -> np.ndarray:
        return np.clip(np.asarray(c, dtype=np.float64), self.lower, self.upper)

    def meets_ball(self, c, eps: float) -> np.ndarray:
        """Whether the closed Euclidean ball of radius ``eps`` around ``c`` meets the box.

        Uses the clamped closest point of the closure.  Strictly inside the
        radius the open sides do not matter (the box is nondegenerate there),
        and at exactly the radius the unique closest point decides.
        """
        c = np.asarray(c, dtype=np.float64)
        if self.is_empty:
            return np.zeros(c.shape[:-1], bool)
        p = self.closest_point(c)
        d2 = np.sum((c - p) ** 2, axis=-1)
        return (d2 < eps * eps) | ((d2 <= eps * eps) & self.contains(p))

    def inside_ball_complement(self, c, eps: float) -> np.ndarray:
        """Whether the closed ball around ``c`` lies entirely within the box."""
        c = np.asarray(c, dtype=np.float64)
        lo_ok = np.where(self.lower_closed, c - eps >= self.lower, c - eps > self.lower)
        hi_ok = np.where(self.upper_closed, c + eps <= self.upper, c + eps < self.upper)
        return np.all(lo_ok & hi_ok, axis=-1)

    def leaves_closed_box(self, lower, upper) -> bool:
        """Whether some point of this box lies outside the closed box [lower, upper]."""
        if self.is_empty:
            return False
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        return bool(np.any(self.lower < lower) or np.any(self.upper > upper))


@dataclass(frozen=True)
class LabellingFunction:
    """Ordered (letter, union of boxes) regions plus an optional default letter.

    Construction checks that the regions are pairwise disjoint and, unless a
    default letter is given, that they cover the whole output space.  The
    check is exact: every box face lies on a breakpoint of the coordinate
    arrangement, so testing one point per arrangement cell decides both
    properties.
    """

    regions: tuple
    dim: int
    default: str | None = None
    letters: tuple = field(init=False)

    def __post_init__(self):
        regions = tuple((str(letter), tuple(boxes)) for letter, boxes in self.regions)
        object.__setattr__(self, "regions", regions)
        letters = [letter for letter, _ in regions]
        if self.default is not None:
            letters.append(self.default)
        if len(set(letters)) != len(letters):
            raise ConfigError(f"duplicate letters in labelling: {letters}")
        object.__setattr__(self, "letters", tuple(letters))
        for letter, boxes in regions:
            for b in boxes:
                if b.dim != self.dim:
                    raise ConfigError(f"region {letter}: box of dimension {b.dim}, expected {self.dim}")
        self._validate()
        self._build_lookup()

    def _cuts(self) -> list:
        cuts = []
        for d in range(self.dim):
            vals = {float(v) for _, boxes in self.regions for b in boxes for v in (b.lower[d], b.upper[d])
                    if np.isfinite(v)}
            cuts.append(np.array(sorted(vals)))
        return cuts

    def _build_lookup(self):
        # One label per cell of the breakpoint arrangement.  Along each axis the
        # code l + r (left/right insertion points) enumerates the open gaps and
        # the breakpoints themselves, so boxes are constant on every cell.
        cuts = self._cuts()
        reps = []
        for c in cuts:
            mids = 0.5 * (c[:-1] + c[1:])
            pts = np.empty(2 * len(c) + 1)
            pts[0] = c[0] - 1.0 if len(c) else 0.0
            pts[-1] = c[-1] + 1.0 if len(c) else 0.0
            pts[1:-1:2] = c
            pts[2:-1:2] = mids
            reps.append(pts)
        grid = np.array(list(itertools.product(*reps)), dtype=np.float64).reshape(-1, self.dim)
        table = self._label_slow(grid).reshape([len(r) for r in reps])
        object.__setattr__(self, "_lookup", (cuts, table))

    def _label_slow(self, y: np.ndarray) -> np.ndarray:
        idx = np.full(y.shape[:-1], -1, dtype=np.int64)
        for i, (_, boxes) in enumerate(self.regions):
            for b in boxes:
                idx = np.where((idx < 0) & b.contains(y), i, idx)
        if self.default is not None:
            idx = np.where(idx < 0, len(self.regions), idx)
        return idx

    def _probe_points(self) -> np.ndarray:
        axes = []
        for d in range(self.dim):
            cuts = set()
            for _, boxes in self.regions:
                for b in boxes:
                    for v in (b.lower[d], b.upper[d]):
                        if np.isfinite(v):
                            cuts.add(float(v))
            cuts = sorted(cuts)
            if not cuts:
                axes.append(np.array([0.0]))
                continue
            pts = [cuts[0] - 1.0, cuts[-1] + 1.0]
            pts += cuts
            pts += [0.5 * (a + b) for a, b in zip(cuts[:-1], cuts[1:])]
            axes.append(np.array(sorted(pts)))
        grid = np.array(list(itertools.product(*axes)), dtype=np.float64)
        return grid.reshape(-1, self.dim)

    def _validate(self):
        pts = self._probe_points()
        counts = np.zeros(len(pts), dtype=int)
        for _, boxes in self.regions:
            member = np.zeros(len(pts), bool)
            for b in boxes:
                inside = b.contains(pts)
                if np.any(member & inside):
                    raise ConfigError("labelling boxes of one region overlap")
                member |= inside
            counts += member
        if np.any(counts > 1):
            bad = pts[np.argmax(counts > 1)]
            raise ConfigError(f"labelling regions overlap at output {bad.tolist()}")
        if self.default is None and np.any(counts == 0):
            bad = pts[np.argmax(counts == 0)]
            raise ConfigError(f"labelling regions do not cover output {bad.tolist()} and no default letter is set")

    def label_index(self, y) -> np.ndarray:
        """Letter index for an output (d,) or a batch (N, d)."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != self.dim:
            raise ConfigError(f"output has {y.shape[-1]} entries, labelling expects {self.dim}")
        cuts, table = self._lookup
        codes = tuple(np.searchsorted(c, y[..., d], "left") + np.searchsorted(c, y[..., d], "right")
                      for d, c in enumerate(cuts))
        idx = table[codes]
        if np.isnan(y).any():
            raise ConfigError("output contains NaN")
        if self.default is None and np.any(idx < 0):
            raise ConfigError("output not covered by any region")
        return idx

    def letters_near(self, c, eps: float) -> np.ndarray:
        """Boolean mask over letters whose region meets the closed eps-ball around ``c``."""
        out = np.zeros(len(self.letters), bool)
        inside_one = False
        for i, (_, boxes) in enumerate(self.regions):
            for b in boxes:
                if b.meets_ball(c, eps):
                    out[i] = True
                if b.inside_ball_complement(c, eps):
                    inside_one = True
        if self.default is not None:
            # conservative: the default region is assumed reachable unless the
            # ball sits inside a single listed box
            out[-1] = not inside_one
        return out

    def letters_outside_box(self, lower, upper) -> np.ndarray:
        """Boolean mask over letters whose region has points outside [lower, upper]."""
        out = np.zeros(len(self.letters), bool)
        for i, (_, boxes) in enumerate(self.regions):
            out[i] = any(b.leaves_closed_box(lower, upper) for b in boxes)
        if self.default is not None:
            out[-1] = True
        return out


@dataclass(frozen=True)
class SafetyAutomaton:
    """Total DFA with integer-indexed states and letters.

    ``table[q, a]`` is the successor of state ``q`` under letter ``a``.
    Accepting states are made absorbing on construction.
    """

    states: tuple
    letters: tuple
    initial: int
    accepting: np.ndarray
    table: np.ndarray
    mode: Mode = Mode.ROBUST

    def __post_init__(self):
        states = tuple(str(s) for s in self.states)
        letters = tuple(str(a) for a in self.letters)
        table = np.array(self.table, dtype=np.int64)
        acc = np.zeros(len(states), bool)
        acc[np.asarray(self.accepting, dtype=np.int64)] = True
        if table.shape != (len(states), len(letters)):
            raise ConfigError(f"transition table shape {table.shape} != ({len(states)}, {len(letters)})")
        if np.any(table < 0) or np.any(table >= len(states)):
            raise ConfigError("transition table references an unknown state")
        if not acc.any():
            raise ConfigError("accepting set is empty")
        if not 0 <= int(self.initial) < len(states):
            raise ConfigError("initial state out of range")
        absorbing = np.arange(len(states))[:, None]
        table = np.where(acc[:, None], absorbing, table)
        for name, v in (("states", states), ("letters", letters), ("table", table), ("accepting", acc)):
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "initial", int(self.initial))
        object.__setattr__(self, "mode", Mode(self.mode))

    @classmethod
    def from_triples(cls, states, letters, initial, accepting, triples, mode=Mode.ROBUST):
        s_ix = {s: i for i, s in enumerate(states)}
        a_ix = {a: i for i, a in enumerate(letters)}
        table = np.full((len(states), len(letters)), -1, dtype=np.int64)
        for src, letter, dst in triples:
            try:
                i, a, j = s_ix[src], a_ix[letter], s_ix[dst]
            except KeyError as exc:
                raise ConfigError(f"transition ({src}, {letter}, {dst}) names unknown symbol {exc}") from None
            if table[i, a] >= 0 and table[i, a] != j:
                raise ConfigError(f"nondeterministic transition from {src} on {letter}")
            table[i, a] = j
        acc = np.array([s_ix[s] for s in accepting], dtype=np.int64)
        acc_mask = np.zeros(len(states), bool)
        acc_mask[acc] = True
        missing = [(states[i], letters[a]) for i, a in zip(*np.nonzero(table < 0)) if not acc_mask[i]]
        if missing:
            raise ConfigError(f"transition function is not total, missing {missing[:5]}")
        table[acc_mask] = np.arange(len(states))[acc_mask, None]
        return cls(tuple(states), tuple(letters), s_ix[initial], acc, table, mode)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_index(self, name: str) -> int:
        return self.states.index(name)

    def letter_index(self, letter: str) -> int:
        try:
            return self.letters.index(letter)
        except ValueError:
            raise ConfigError(f"unknown letter {letter!r}") from None


def check_compatible(A: SafetyAutomaton, L: LabellingFunction):
    if tuple(A.letters) != tuple(L.letters):
        raise ConfigError(f"automaton letters {A.letters} differ from labelling letters {L.letters}")


def label(L: LabellingFunction, y) -> str:
    return L.letters[int(L.label_index(y))]


def dfa_step(A: SafetyAutomaton, q: int, letter: str) -> int:
    return int(A.table[q, A.letter_index(letter)])


def initial_q(A: SafetyAutomaton, L: LabellingFunction, h: Callable[[np.ndarray], np.ndarray], x0) -> int:
    """DFA state after reading the label of the initial output."""
    return int(A.table[A.initial, int(L.label_index(h(np.asarray(x0, dtype=np.float64))))])


def run_trace(A: SafetyAutomaton, L: LabellingFunction, trace: Sequence) -> np.ndarray:
    """DFA states visited while reading ``trace``, starting with the initial state."""
    qs = [A.initial]
    if len(trace):
        letters = L.label_index(np.asarray(trace, dtype=np.float64).reshape(len(trace), L.dim))
        for a in letters:
            qs.append(int(A.table[qs[-1], a]))
    return np.array(qs, dtype=np.int64)


def accepts(A: SafetyAutomaton, L: LabellingFunction, trace: Sequence) -> bool:
    """Whether the run on ``trace`` reaches an accepting state."""
    return bool(A.accepting[run_trace(A, L, trace)].any())


def reach_and_hold_triples(deadline: int, hold: int, target: str, neutral: str, forbidden: str):
    """Transition triples for "enter ``target`` by step ``deadline``, then stay ``hold`` more steps".

    The first visit to ``target`` commits the run: leaving it during the
    hold, reading ``forbidden`` at any time, or missing the deadline leads
    to an absorbing ``fail`` state.  Waiting states ``w0..w{deadline}``
    count letters read so far, ``h1..h{hold}`` count consecutive target
    letters and ``acc`` is accepting.
    """
    waits = [f"w{k}" for k in range(deadline + 1)]
    holds = [f"h{k}" for k in range(1, hold + 1)]
    states = waits + holds + ["acc", "fail"]
    triples = []
    for k, w in enumerate(waits):
        triples.append((w, target, holds[0] if holds else "acc"))
        triples.append((w, neutral, waits[k + 1] if k < deadline else "fail"))
        triples.append((w, forbidden, "fail"))
    for k, h in enumerate(holds):
        triples.append((h, target, holds[k + 1] if k + 1 < len(holds) else "acc"))
        triples.append((h, neutral, "fail"))
        triples.append((h, forbidden, "fail"))
    for letter in (target, neutral, forbidden):
        triples.append(("fail", letter, "fail"))
    return states, triples
