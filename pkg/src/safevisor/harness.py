"""Monte Carlo experiments, metrics, reports and the resolution sweep."""
from __future__ import annotations

import csv
import gc
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .abstraction import locate, memory_estimate
from .controllers import controller_from_config
from .runtime import Architecture, run_single, simulate_batch
from .scenario import Scenario, advisor_bound, build_architecture, with_overrides
from .spec import Mode
from .synthesis import export_grid_csv, guarantee_grid

log = logging.getLogger(__name__)

#: Grid sizes and relation radii of the bundled resolution sweep.
SWEEP_CELLS = (10, 20, 30, 40, 50, 60)
SWEEP_EPSILON = (0.5021, 0.2297, 0.1518, 0.1138, 0.0911, 0.0759)


@dataclass
class RunMetrics:
    """Aggregate outcome of a Monte Carlo experiment."""

    label: str
    n_runs: int
    horizon: int
    satisfaction: float
    violation: float
    acceptance_rate: float
    latency_ms_mean: float | None = None
    latency_ms_p50: float | None = None
    latency_ms_p99: float | None = None
    breaches_mean: float = 0.0
    advisor_bound: float | None = None
    elapsed_s: float = 0.0
    outcomes: list = field(default_factory=list, repr=False)

    @property
    def std_error(self) -> float:
        p = self.satisfaction
        return float(np.sqrt(max(p * (1 - p), 0.0) / max(self.n_runs, 1)))

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        return d


def configuration_label(supervisor: bool, advisor_only: bool) -> str:
    if advisor_only:
        return "advisor-only"
    return "safevisor" if supervisor else "unsupervised"


def measure_latency(arch: Architecture, controller, seed: int, runs, steps: int | None = None) -> np.ndarray:
    """Per-decision supervisor latencies (ns) from the single-run reference loop."""
    lat = []
    enabled = gc.isenabled()
    gc.disable()
    try:
        for r in runs:
            _, _, visor = run_single(arch, controller, seed, int(r), steps=steps)
            lat.extend(e["latency_ns"] for e in visor.sup.decision_log)
    finally:
        if enabled:
            gc.enable()
    return np.asarray(lat, dtype=np.float64)


_WORKER = {}


def _worker_init(arch, automaton, controller):
    _WORKER.update(arch=arch, automaton=automaton, controller=controller)


def _worker_batch(runs, seed, supervisor, advisor_only):
    res = simulate_batch(_WORKER["arch"], _WORKER["controller"], runs, seed, supervisor=supervisor,
                         advisor_only=advisor_only)
    return res.satisfied(_WORKER["automaton"]), res.accepted_steps, res.breaches


def run_monte_carlo(sc: Scenario, arch: Architecture, n_runs: int | None = None, controller=None,
                    seed: int | None = None, supervisor: bool = True, advisor_only: bool = False,
                    batch_size: int = 250, latency_runs: int = 0, latency_steps: int | None = None,
                    workers: int = 1) -> RunMetrics:
    """Run independent trajectories through the control loop and aggregate them.

    Run ``r`` draws its noise and controller randomness from streams keyed by
    ``(seed, r)``, so results depend neither on ``batch_size`` nor on
    ``workers``; batches are reduced in run order.
    """
    n_runs = sc.runs if n_runs is None else int(n_runs)
    seed = sc.seed if seed is None else int(seed)
    controller = controller if controller is not None else controller_from_config(sc.controller, sc.model.input_bounds)
    t0 = time.perf_counter()
    batches = [np.arange(s, min(s + batch_size, n_runs)) for s in range(0, n_runs, batch_size)]
    if workers > 1 and len(batches) > 1:
        with ProcessPoolExecutor(workers, initializer=_worker_init,
                                 initargs=(arch, sc.automaton, controller)) as pool:
            parts = list(pool.map(_worker_batch, batches, [seed] * len(batches), [supervisor] * len(batches),
                                  [advisor_only] * len(batches)))
    else:
        _worker_init(arch, sc.automaton, controller)
        parts = [_worker_batch(b, seed, supervisor, advisor_only) for b in batches]
        _WORKER.clear()
    sat = [p[0] for p in parts]
    acc = [p[1] for p in parts]
    br = [p[2] for p in parts]
    sat = np.concatenate(sat) if sat else np.zeros(0, bool)
    acc = np.concatenate(acc) if acc else np.zeros(0, int)
    br = np.concatenate(br) if br else np.zeros(0, int)
    elapsed = time.perf_counter() - t0
    metrics = RunMetrics(
        label=configuration_label(supervisor, advisor_only), n_runs=n_runs, horizon=arch.horizon,
        satisfaction=float(sat.mean()) if n_runs else float("nan"),
        violation=float(1 - sat.mean()) if n_runs else float("nan"),
        acceptance_rate=float(acc.mean() / arch.horizon) if n_runs else float("nan"),
        breaches_mean=float(br.mean()) if n_runs else 0.0,
        advisor_bound=advisor_bound(arch, sc), elapsed_s=elapsed,
        outcomes=[{"run": i, "satisfied": bool(s), "accepted_steps": int(a), "breaches": int(b)}
                  for i, (s, a, b) in enumerate(zip(sat, acc, br))],
    )
    if latency_runs and supervisor and not advisor_only:
        lat = measure_latency(arch, controller, seed, range(min(latency_runs, n_runs)), latency_steps) / 1e6
        metrics.latency_ms_mean = float(lat.mean())
        metrics.latency_ms_p50 = float(np.percentile(lat, 50))
        metrics.latency_ms_p99 = float(np.percentile(lat, 99))
    log.info("%s: satisfaction %.4f, acceptance %.4f (%d runs, %.1f s)", metrics.label,
             metrics.satisfaction, metrics.acceptance_rate, n_runs, elapsed)
    return metrics


def guarantee_ok(metrics: RunMetrics, eta: float) -> bool:
    """Whether the observed violation frequency respects ``eta`` up to three standard errors."""
    n = max(metrics.n_runs, 1)
    return metrics.violation <= eta + 3 * np.sqrt(max(eta, 1.0 / n) / n)


# --- resolution sweep --------------------------------------------------------

@dataclass
class SweepRow:
    cells: int
    states: int
    epsilon: float
    memory_bytes: int
    memory_gib: float
    latency_ms_mean: float
    advisor_bound: float
    acceptance_rate: float


def resolution_scenario(sc: Scenario, cells: int, eps: float) -> Scenario:
    """Copy of a two-dimensional scenario on a ``cells`` x ``cells`` grid with radius ``eps``."""
    from .abstraction import build_partition

    grid = build_partition(sc.raw["abstraction"]["bounds"], [cells] * sc.abstraction.grid.dim)
    xh0 = grid.centers[int(locate(grid, sc.model.x0 @ np.linalg.pinv(sc.relation.P).T))]
    return with_overrides(sc, abstraction={"cells": [cells] * grid.dim, "x0": xh0.tolist()},
                          relation={"epsilon": eps})


def _timed_run(arch, ctrl, seed, run, steps):
    enabled = gc.isenabled()
    gc.disable()
    try:
        _, _, visor = run_single(arch, ctrl, seed, run, steps=steps)
    finally:
        if enabled:
            gc.enable()
    log_ = visor.sup.decision_log
    return [e["latency_ns"] for e in log_], sum(e["accepted"] for e in log_)


def resolution_sweep(sc: Scenario, cells=SWEEP_CELLS, epsilons=SWEEP_EPSILON, latency_steps: int = 2000,
                     latency_runs: int = 1, seed: int | None = None, repeats: int = 3) -> list:
    """Grid refinement study: state count, memory, supervisor latency and advisor bound.

    Latency is timed in ``repeats`` rounds that visit every grid in turn, and
    each grid keeps the mean of its least disturbed round, so slow drift or a
    burst of interference on a shared machine cannot reorder the grids.
    """
    seed = sc.seed if seed is None else seed
    subs = [resolution_scenario(sc, n, eps) for n, eps in zip(cells, epsilons)]
    archs = [build_architecture(sub) for sub in subs]
    best = [np.inf] * len(subs)
    accepted = [0.0] * len(subs)
    for _ in range(max(1, repeats)):
        for i, (sub, arch) in enumerate(zip(subs, archs)):
            ctrl = controller_from_config(sub.controller, sub.model.input_bounds)
            lat_ns, acc = [], 0
            for r in range(latency_runs):
                lat, a = _timed_run(arch, ctrl, seed, r, latency_steps)
                lat_ns.extend(lat)
                acc += a
            best[i] = min(best[i], float(np.mean(lat_ns)) / 1e6)
            accepted[i] = acc / max(len(lat_ns), 1)
    rows = []
    for n, eps, sub, arch, lat, acc in zip(cells, epsilons, subs, archs, best, accepted):
        states = sub.abstraction.n_states
        mem = memory_estimate(states, sub.abstraction.n_inputs)
        rows.append(SweepRow(n, states, eps, mem, mem / 2**30, lat, advisor_bound(arch, sub), acc))
        log.info("sweep %dx%d: %d states, latency %.4f ms", n, n, states, lat)
    return rows


# --- reporting ---------------------------------------------------------------

def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def report(metrics, sc: Scenario, out_dir, arch: Architecture | None = None, sweep=None) -> list:
    """Write metrics JSON, per-run CSVs, the guarantee grid and an optional sweep table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = list(metrics) if isinstance(metrics, (list, tuple)) else [metrics]
    written = []
    summary = {"scenario": sc.name, "eta": sc.eta, "horizon": sc.horizon, "mode": sc.mode.value,
               "configurations": [m.summary() for m in metrics]}
    p = out / "metrics.json"
    p.write_text(json.dumps(summary, indent=2))
    written.append(p)
    for m in metrics:
        rows = [(o["run"], int(o["satisfied"]), o["accepted_steps"], o["accepted_steps"] / max(m.horizon, 1),
                 o["breaches"]) for o in m.outcomes]
        written.append(_write_csv(out / f"runs_{m.label}.csv",
                                  ["run", "satisfied", "accepted_steps", "acceptance_rate", "breaches"], rows))
    if arch is not None:
        grid = guarantee_grid(arch.values, arch.product, sc.automaton, sc.labels, arch.abstraction)
        written.append(export_grid_csv(grid, arch.abstraction, out / "guarantee_grid.csv"))
    header = ["cells", "states", "epsilon", "memory_bytes", "memory_gib", "latency_ms_mean", "advisor_bound",
              "acceptance_rate"]
    rows = [] if sweep is None else [astuple_row(r) for r in sweep]
    if sweep is not None or not metrics:
        written.append(_write_csv(out / "resolution_sweep.csv", header, rows))
    return written


def astuple_row(r: SweepRow):
    return (r.cells, r.states, r.epsilon, r.memory_bytes, r.memory_gib, r.latency_ms_mean, r.advisor_bound,
            r.acceptance_rate)


def write_decision_log(visor, path) -> Path:
    """Per-step CSV of one run's decisions."""
    path = Path(path)
    rows = []
    for e in visor.sup.decision_log:
        rows.append([e["k"], int(e["accepted"]), "" if e["epv"] is None else repr(e["epv"]),
                     " ".join(repr(float(v)) for v in e["u"]), " ".join(repr(float(v)) for v in e["x"]),
                     e["xh"], e["q"], e["latency_ns"]])
    return _write_csv(path, ["k", "accepted", "epv", "u_applied", "x", "xh_index", "q", "latency_ns"], rows)
