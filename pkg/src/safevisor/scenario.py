"""Scenario files: parsing, validation and assembly of the runtime architecture.

A scenario is a JSON document with five blocks (``model``, ``spec``,
``abstraction``, ``relation``, ``run``).  Matrices are row-major nested
lists; infinite box bounds are written as the strings ``"inf"``/``"-inf"``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .abstraction import FiniteAbstraction, build_partition, load_kernel, save_kernel
from .errors import ConfigError, ValidationError
from .model import RNG_ALGORITHM, SystemModel, output
from .relation import (ProbRelation, admissible_inputs, compute_gamma, in_relation, output_gain,
                       relation_value)
from .runtime import Architecture
from .spec import Box, LabellingFunction, Mode, SafetyAutomaton, check_compatible
from .synthesis import build_product, synthesize

log = logging.getLogger(__name__)

#: Environment variable naming a directory for kernel caches.
CACHE_ENV = "SAFEVISOR_CACHE"
BUNDLED = ("two_car", "dc_motor")


@dataclass
class Scenario:
    name: str
    raw: dict
    model: SystemModel
    automaton: SafetyAutomaton
    labels: LabellingFunction
    abstraction: FiniteAbstraction
    relation: ProbRelation
    horizon: int
    eta: float
    seed: int
    runs: int
    controller: dict
    input_grid: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def mode(self) -> Mode:
        return self.automaton.mode

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def initial_q(self) -> int:
        y = output(self.model, self.model.x0)
        return int(self.automaton.table[self.automaton.initial, self.labels.label_index(y)])


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled scenario {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("safevisor") / "data" / f"{name}.json"))


def _num(v):
    if isinstance(v, str):
        return float(v)
    if isinstance(v, list):
        return [_num(e) for e in v]
    return v


class _Collector:
    """Accumulates validation problems with their ``block.field`` locations."""

    def __init__(self):
        self.problems = []

    def get(self, block: dict, name: str, loc: str, required=True, default=None):
        if name not in block:
            if required:
                self.problems.append((loc, "missing"))
            return default
        return block[name]

    def matrix(self, block, name, loc, shape=None, required=True):
        raw = self.get(block, name, loc, required)
        if raw is None:
            return None
        try:
            arr = np.atleast_2d(np.array(_num(raw), dtype=np.float64))
        except (TypeError, ValueError) as exc:
            self.problems.append((loc, f"not a numeric matrix ({exc})"))
            return None
        if arr.ndim != 2:
            self.problems.append((loc, f"expected a matrix, got shape {arr.shape}"))
            return None
        if shape is not None:
            want = tuple(arr.shape[i] if s is None else s for i, s in enumerate(shape))
            if arr.shape != want:
                self.problems.append((loc, f"dimension mismatch: shape {arr.shape}, expected {want}"))
                return None
        return arr

    def vector(self, block, name, loc, length=None, required=True):
        raw = self.get(block, name, loc, required)
        if raw is None:
            return None
        arr = np.array(_num(raw), dtype=np.float64).reshape(-1)
        if length is not None and len(arr) != length:
            self.problems.append((loc, f"dimension mismatch: {len(arr)} entries, expected {length}"))
            return None
        return arr

    def check(self, cond, loc, msg):
        if not cond:
            self.problems.append((loc, msg))
        return cond

    def raise_if_any(self):
        if self.problems:
            raise ValidationError(self.problems)


def _parse_box(raw, dim, loc, col: _Collector):
    lo = col.vector(raw, "lower", f"{loc}.lower", dim)
    hi = col.vector(raw, "upper", f"{loc}.upper", dim)
    lc = raw.get("lower_closed", [True] * dim)
    uc = raw.get("upper_closed", [True] * dim)
    if lo is None or hi is None:
        return None
    if len(lc) != dim or len(uc) != dim:
        col.problems.append((loc, "inclusivity flags have the wrong length"))
        return None
    return Box(lo, hi, lc, uc)


def parse_scenario(raw: dict, name: str | None = None) -> Scenario:
    """Validate a scenario dictionary; raises :class:`ValidationError` listing every problem."""
    col = _Collector()
    for block in ("model", "spec", "abstraction", "relation", "run"):
        col.check(isinstance(raw.get(block), dict), block, "missing block")
    col.raise_if_any()
    mb, sb, ab, rb, run = (raw[b] for b in ("model", "spec", "abstraction", "relation", "run"))

    # model
    A = col.matrix(mb, "A", "model.A")
    s = A.shape[0] if A is not None else None
    if A is not None:
        col.check(A.shape == (s, s), "model.A", f"dimension mismatch: shape {A.shape} is not square")
    B = col.matrix(mb, "B", "model.B", (s, None))
    m = B.shape[1] if B is not None else None
    C = col.matrix(mb, "C", "model.C", (None, s))
    R = col.matrix(mb, "R", "model.R", (s, None))
    E = col.matrix(mb, "E", "model.E", (s, 1), required=False)
    F = col.matrix(mb, "F", "model.F", (1, s), required=False)
    ub = col.matrix(mb, "input_bounds", "model.input_bounds", (m, 2))
    x0 = col.vector(mb, "x0", "model.x0", s)
    if ub is not None:
        col.check(np.all(ub[:, 0] <= ub[:, 1]), "model.input_bounds", "empty input box")
    col.check((E is None) == (F is None), "model.E", "E and F must be given together")
    col.raise_if_any()
    model = SystemModel(A=A, B=B, C=C, R=R, E=E, F=F, input_bounds=ub, x0=x0)

    # spec
    mode = col.get(sb, "mode", "spec.mode")
    col.check(mode in ("robust", "worst"), "spec.mode", f"must be 'robust' or 'worst', got {mode!r}")
    qdim = model.n_outputs
    regions = []
    for i, reg in enumerate(col.get(sb, "labels", "spec.labels", default=[])):
        boxes = [_parse_box(b, qdim, f"spec.labels[{i}].boxes[{j}]", col) for j, b in enumerate(reg.get("boxes", []))]
        regions.append((reg.get("letter"), [b for b in boxes if b is not None]))
    col.raise_if_any()
    try:
        labels = LabellingFunction(tuple(regions), qdim, default=sb.get("default_letter"))
        letters = sb.get("letters", list(labels.letters))
        automaton = SafetyAutomaton.from_triples(
            sb["states"], letters, sb["initial"], sb["accepting"], sb["transitions"], mode=mode)
        check_compatible(automaton, labels)
    except (ConfigError, KeyError) as exc:
        raise ValidationError([("spec", str(exc))]) from None

    # abstraction
    Ah = col.matrix(ab, "A", "abstraction.A")
    r = Ah.shape[0] if Ah is not None else None
    Bh = col.matrix(ab, "B", "abstraction.B", (r, None))
    Ch = col.matrix(ab, "C", "abstraction.C", (qdim, r))
    Rh = col.matrix(ab, "R", "abstraction.R", (r, model.n_noise))
    Eh = col.matrix(ab, "E", "abstraction.E", (r, 1), required=False)
    Fh = col.matrix(ab, "F", "abstraction.F", (1, r), required=False)
    P = col.matrix(ab, "P", "abstraction.P", (s, r))
    bounds = col.matrix(ab, "bounds", "abstraction.bounds", (r, 2))
    cells = col.vector(ab, "cells", "abstraction.cells", r)
    ib = col.matrix(ab, "input_bounds", "abstraction.input_bounds", (None, 2))
    icells = col.vector(ab, "input_cells", "abstraction.input_cells")
    xh0 = col.vector(ab, "x0", "abstraction.x0", r)
    if cells is not None:
        col.check(np.all(cells >= 1) and np.all(cells == np.round(cells)), "abstraction.cells", "must be positive integers")
    col.raise_if_any()
    input_grid = build_partition(ib, icells.astype(int)).centers

    # relation
    M = col.matrix(rb, "M", "relation.M", (s, s))
    eps = col.get(rb, "epsilon", "relation.epsilon")
    delta = col.get(rb, "delta", "relation.delta")
    col.check(isinstance(eps, (int, float)) and eps > 0, "relation.epsilon", "must be positive")
    col.check(isinstance(delta, (int, float)) and 0 <= delta < 1, "relation.delta", "must lie in [0, 1)")
    iface = col.get(rb, "interface", "relation.interface", default={})
    col.raise_if_any()
    form = iface.get("form")
    mats = {k: col.matrix(iface, k, f"relation.interface.{k}") for k in
            (("K", "D", "R") if form == "linear" else ("K", "L", "G"))}
    col.check(form in ("linear", "slope"), "relation.interface.form", f"unknown form {form!r}")
    col.raise_if_any()
    try:
        rel = ProbRelation(M=M, P=P, eps=float(eps), delta=float(delta), form=form, K=mats["K"],
                           D=mats.get("D"), Rt=mats.get("R"), L=mats.get("L"), G=mats.get("G"))
    except ConfigError as exc:
        raise ValidationError([("relation", str(exc))]) from None

    # run
    H = col.get(run, "horizon", "run.horizon")
    eta = col.get(run, "eta", "run.η")
    col.check(isinstance(H, int) and H >= 1, "run.horizon", "must be a positive integer")
    col.check(isinstance(eta, (int, float)) and 0 <= eta <= 1, "run.η", f"must lie in [0, 1], got {eta}")
    runs = run.get("runs", 1000)
    col.check(isinstance(runs, int) and runs >= 1, "run.runs", "must be a positive integer")
    rng = run.get("rng", RNG_ALGORITHM)
    col.check(rng == RNG_ALGORITHM, "run.rng", f"only {RNG_ALGORITHM} is supported")
    col.raise_if_any()

    # abstract input subset, then the abstraction itself
    probe = FiniteAbstraction(A=Ah, B=Bh, C=Ch, R=Rh, E=Eh, F=Fh, P=P, grid=build_partition(bounds, cells.astype(int)),
                              inputs=input_grid, x0=xh0, prune_tol=float(ab.get("prune_tol", 1e-14)))
    subset = rb.get("input_subset", "all")
    warnings = []
    if subset == "auto":
        keep = admissible_inputs(rel, model, probe, input_grid)
    elif subset == "all":
        keep = np.ones(len(input_grid), bool)
        bad = ~admissible_inputs(rel, model, probe, input_grid)
        if bad.any():
            warnings.append(("relation.input_subset", f"{int(bad.sum())} abstract inputs may refine outside the plant bounds"))
    else:
        sub = np.array(_num(subset), dtype=np.float64).reshape(-1, 2)
        keep = np.all((input_grid >= sub[:, 0]) & (input_grid <= sub[:, 1]), axis=1)
    if not keep.any():
        raise ValidationError([("relation.input_subset", "restricted abstract input set is empty")])
    probe.inputs = input_grid[keep]
    abs_ = probe
    rel.gamma = compute_gamma(rel, model, abs_)

    # cross-block invariants
    col.check(rel.gamma < rel.eps, "relation.epsilon", f"margin gamma={rel.gamma:.4g} leaves no room below epsilon")
    gain = output_gain(rel, model, abs_)
    col.check(gain <= 1.0 + 1e-9, "relation.M", f"related outputs can differ by {gain:.4g} * epsilon")
    col.check(abs_.initial_index() != abs_.sink, "abstraction.x0", "initial abstract state lies outside the grid")
    if col.check(bool(in_relation(rel, x0, xh0)), "abstraction.x0",
                 f"initial pair not related: {float(relation_value(rel, x0, xh0)):.4g} > {rel.eps ** 2:.4g}"):
        pass
    sc = Scenario(
        name=name or raw.get("name", "scenario"), raw=copy.deepcopy(raw), model=model, automaton=automaton,
        labels=labels, abstraction=abs_, relation=rel, horizon=int(H), eta=float(eta), seed=int(run.get("seed", 0)),
        runs=int(runs), controller=dict(run.get("controller", {"kind": "random"})), input_grid=input_grid,
        warnings=warnings,
    )
    col.check(not automaton.accepting[sc.initial_q()], "model.x0", "initial output already reaches the accepting set")
    col.raise_if_any()
    for loc, msg in warnings:
        log.warning("%s: %s", loc, msg)
    return sc


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file (or a bundled scenario name)."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_path(str(path))
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ValidationError([("file", f"{p} does not exist")]) from None
    except json.JSONDecodeError as exc:
        raise ValidationError([("file", f"parse error: {exc}")]) from None
    return parse_scenario(raw, raw.get("name", p.stem))


def with_overrides(sc: Scenario, **changes) -> Scenario:
    """Re-validate a copy of the scenario with nested overrides, e.g. ``run={"eta": 0.05}``."""
    raw = copy.deepcopy(sc.raw)
    for block, vals in changes.items():
        raw.setdefault(block, {}).update(vals)
    return parse_scenario(raw, sc.name)


def cache_dir() -> Path | None:
    d = os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def build_abstraction(sc: Scenario, cache: Path | None = None) -> FiniteAbstraction:
    """Kernel for the scenario, loaded from or written to the cache directory when given."""
    abs_ = sc.abstraction
    if abs_.kernel is not None:
        return abs_
    cache = cache if cache is not None else cache_dir()
    if cache is not None:
        path = Path(cache) / f"{sc.name}-{abs_.scenario_hash()[:16]}.kernel"
        if path.exists():
            load_kernel(abs_, path)
            log.info("loaded kernel cache %s", path)
            return abs_
        abs_.build()
        Path(cache).mkdir(parents=True, exist_ok=True)
        save_kernel(abs_, path)
        return abs_
    return abs_.build()


def build_architecture(sc: Scenario, cache: Path | None = None, eta: float | None = None) -> Architecture:
    """Abstraction, product, synthesized tables and runtime context for a scenario."""
    abs_ = build_abstraction(sc, cache)
    product = build_product(abs_, sc.automaton, sc.labels, sc.relation)
    values, policy = synthesize(product, sc.horizon)
    return Architecture(model=sc.model, abstraction=abs_, relation=sc.relation, automaton=sc.automaton,
                        labels=sc.labels, product=product, values=values, policy=policy,
                        horizon=sc.horizon, eta=sc.eta if eta is None else eta)


def advisor_bound(arch: Architecture, sc: Scenario) -> float:
    """Advisor guarantee at the initial pair: violation bound (worst) or satisfaction bound (robust)."""
    V = arch.values.final[sc.abstraction.initial_index(), sc.initial_q()]
    return float(V)
