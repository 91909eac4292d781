"""Command-line entry point.

Exit codes: 0 on success, 2 when the scenario fails validation, 3 when
``--check`` is given and an empirical guarantee assertion fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .controllers import RandomController, controller_from_config
from .errors import ConfigError, ValidationError
from .harness import (SWEEP_CELLS, SWEEP_EPSILON, guarantee_ok, report, resolution_sweep,
                      run_monte_carlo)
from .relation import relation_value
from .scenario import build_abstraction, build_architecture, cache_dir, load_scenario, with_overrides
from .synthesis import export_grid_csv, guarantee_grid

log = logging.getLogger("safevisor")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_GUARANTEE = 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenario", help="scenario file or bundled name (two_car, dc_motor)")
    common.add_argument("--runs", type=int, help="number of Monte Carlo runs")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--controller", help="'scenario', 'random', or a JSON controller block / file")
    common.add_argument("--no-supervisor", action="store_true", help="apply the unverified controller directly")
    common.add_argument("--advisor-only", action="store_true", help="reject every unverified input")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="worker processes for Monte Carlo runs")
    common.add_argument("--check", action="store_true", help="assert the empirical guarantee (exit 3 on failure)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safevisor", description="Safety supervision of unverified controllers.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="parse and validate a scenario")
    sub.add_parser("abstract", parents=[common], help="build (and cache) the finite abstraction")
    sub.add_parser("synthesize", parents=[common], help="synthesize the advisor and export its guarantees")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo simulation of one configuration")
    sw = sub.add_parser("sweep", parents=[common], help="grid-resolution study")
    sw.add_argument("--steps", type=int, default=2000, help="supervised steps timed per grid")
    rp = sub.add_parser("report", parents=[common], help="simulate all configurations and write reports")
    rp.add_argument("--sweep", action="store_true", help="include the resolution study")
    return p


def _controller(arg, sc):
    if arg is None or arg == "scenario":
        return controller_from_config(sc.controller, sc.model.input_bounds)
    if arg == "random":
        return RandomController(sc.model.input_bounds)
    path = Path(arg)
    try:
        cfg = json.loads(path.read_text() if path.exists() else arg)
    except json.JSONDecodeError:
        raise ValidationError([("--controller", f"not a controller name, file or JSON block: {arg!r}")]) from None
    try:
        return controller_from_config(cfg, sc.model.input_bounds)
    except (KeyError, ConfigError) as exc:
        raise ValidationError([("--controller", f"invalid controller block: {exc}")]) from None


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


def cmd_validate(args, sc) -> int:
    abs_ = sc.abstraction
    _print({
        "scenario": sc.name, "mode": sc.mode.value, "states": abs_.n_states, "inputs": abs_.n_inputs,
        "dfa_states": len(sc.automaton.states), "horizon": sc.horizon, "eta": sc.eta,
        "epsilon": sc.relation.eps, "gamma": sc.relation.gamma, "delta": sc.relation.delta,
        "initial_relation_value": float(relation_value(sc.relation, sc.model.x0, abs_.x0)),
        "warnings": [f"{loc}: {msg}" for loc, msg in sc.warnings], "hash": sc.content_hash()[:16],
    })
    return EXIT_OK


def cmd_abstract(args, sc) -> int:
    cache = args.out if args.out is not None else cache_dir()
    abs_ = build_abstraction(sc, cache)
    rows = np.asarray(abs_.kernel.sum(axis=1)).ravel()
    _print({"states": abs_.n_states, "inputs": abs_.n_inputs, "nnz": int(abs_.kernel.nnz),
            "max_row_sum_error": float(np.abs(rows - 1).max()), "cache": None if cache is None else str(cache)})
    return EXIT_OK


def cmd_synthesize(args, sc) -> int:
    arch = build_architecture(sc, cache_dir())
    out = {"mode": sc.mode.value, "advisor_bound": float(arch.values.final[sc.abstraction.initial_index(),
                                                                            sc.initial_q()]),
           "stationary_after": arch.values.tail}
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        arch.values.to_csv(args.out / "values.csv")
        grid = guarantee_grid(arch.values, arch.product, sc.automaton, sc.labels, arch.abstraction)
        export_grid_csv(grid, arch.abstraction, args.out / "guarantee_grid.csv")
        out["written"] = str(args.out)
    _print(out)
    return EXIT_OK


def _configurations(args):
    if args.advisor_only:
        return [(True, True)]
    if args.no_supervisor:
        return [(False, False)]
    return None


def _simulate(args, sc, configs):
    arch = build_architecture(sc, cache_dir())
    ctrl = _controller(args.controller, sc)
    results = [run_monte_carlo(sc, arch, args.runs, ctrl, args.seed, supervisor=sup, advisor_only=adv,
                               latency_runs=1 if sup and not adv else 0,
                               latency_steps=min(sc.horizon, 2000), workers=args.workers)
               for sup, adv in configs]
    return arch, results


def _check(args, sc, results) -> int:
    if not args.check:
        return EXIT_OK
    status = EXIT_OK
    for m in results:
        if m.label == "unsupervised":
            continue
        ok = guarantee_ok(m, sc.eta)
        print(f"{'PASS' if ok else 'FAIL'} {m.label}: violation {m.violation:.4f} vs eta {sc.eta}")
        if not ok:
            status = EXIT_GUARANTEE
    return status


def cmd_simulate(args, sc) -> int:
    configs = _configurations(args) or [(True, False)]
    arch, results = _simulate(args, sc, configs)
    _print([m.summary() for m in results])
    if args.out is not None:
        report(results, sc, args.out, arch)
    return _check(args, sc, results)


def cmd_sweep(args, sc) -> int:
    if sc.abstraction.grid.dim != 2:
        raise ValidationError([("abstraction.cells", "the resolution study needs a two-dimensional grid")])
    rows = resolution_sweep(sc, SWEEP_CELLS, SWEEP_EPSILON, latency_steps=args.steps, seed=args.seed)
    _print([r.__dict__ for r in rows])
    if args.out is not None:
        report([], sc, args.out, sweep=rows)
    return EXIT_OK


def cmd_report(args, sc) -> int:
    configs = _configurations(args) or [(True, False), (False, False), (True, True)]
    arch, results = _simulate(args, sc, configs)
    sweep = None
    if args.sweep:
        sweep = resolution_sweep(sc, seed=args.seed)
    out = args.out if args.out is not None else Path("results") / sc.name
    for p in report(results, sc, out, arch, sweep):
        print(p)
    return _check(args, sc, results)


COMMANDS = {"validate": cmd_validate, "abstract": cmd_abstract, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.no_supervisor and args.advisor_only:
        print("error: --no-supervisor and --advisor-only are exclusive", file=sys.stderr)
        return EXIT_INVALID
    try:
        sc = load_scenario(args.scenario)
        overrides = {k: v for k, v in (("runs", args.runs), ("seed", args.seed)) if v is not None}
        if overrides:
            sc = with_overrides(sc, run=overrides)
        return COMMANDS[args.command](args, sc)
    except ValidationError as exc:
        for loc, msg in exc.problems:
            print(f"invalid {loc}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
