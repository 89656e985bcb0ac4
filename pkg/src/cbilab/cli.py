"""Command line entry point: ``cbilab <command> [options]``.

Every command that produces a table writes CSV with the columns
``t, estimate, stderr, theoretical_bound``. Reports go to ``--out`` when given,
otherwise the table is printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from .config import Scenario, load_scenario
from .errors import CbiLabError, ConditionError, ConfigError
from .flow import solve_v, transition_laplace
from .mechanisms import CbiParams, check_conditions
from .scenarios import (
    CSV_COLUMNS,
    ExperimentResult,
    _fmt,
    _jsonable,
    get_scenario,
    list_scenarios,
    run_scenario,
)
from .sde import CbiModel, CbireModel, simulate_ensemble

log = logging.getLogger("cbilab")


def _add_sim_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    p.add_argument("--dt", type=float, help="Euler step")
    p.add_argument("--horizon", type=float, help="final time")
    p.add_argument("--out", help="output directory for CSV and JSON reports")
    p.add_argument("--format", choices=["csv"], default="csv")


def _add_source(p: argparse.ArgumentParser, default: Optional[str]):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--scenario", default=default, help="built-in scenario name")
    g.add_argument("--config", help="scenario document (YAML)")


def _add_cbi_flags(p: argparse.ArgumentParser):
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--b", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, default=2.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbilab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cbilab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list", help="list built-in scenarios")

    p = sub.add_parser("check", help="mechanism report for a CBI model")
    _add_source(p, None)
    _add_cbi_flags(p)

    p = sub.add_parser("flow", help="transition Laplace transform over time")
    _add_source(p, None)
    _add_cbi_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--x", type=float, default=0.0)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--out")
    p.add_argument("--format", choices=["csv"], default="csv")

    p = sub.add_parser("simulate", help="ensemble mean and standard error over time")
    _add_source(p, "cir-w1")
    p.add_argument("--x0", type=float, default=0.0)
    _add_sim_flags(p)

    for name, default, text in (
        ("ergodicity", "cir-w1", "coupling or TV decay experiment"),
        ("fclt", "fclt-cir", "FCLT variance experiment"),
    ):
        p = sub.add_parser(name, help=text)
        _add_source(p, default)
        _add_sim_flags(p)

    p = sub.add_parser("run", help="run a scenario document")
    p.add_argument("config", help="path to a YAML scenario document")
    _add_sim_flags(p)
    return parser


# ---------------------------------------------------------------------------


def _scenario(args) -> Scenario:
    if getattr(args, "config", None):
        sc = load_scenario(args.config)
    else:
        try:
            sc = get_scenario(args.scenario)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), field="scenario") from None
    overrides = {
        k: v
        for k, v in (
            ("master_seed", getattr(args, "seed", None)),
            ("n_paths", getattr(args, "paths", None)),
            ("dt", getattr(args, "dt", None)),
            ("horizon", getattr(args, "horizon", None)),
        )
        if v is not None
    }
    return sc.with_sim(**overrides) if overrides else sc


def _cbi_from_args(args) -> CbiParams:
    if args.scenario or args.config:
        model = _scenario(args).model
        if not isinstance(model, (CbiModel, CbireModel)):
            raise ConditionError("model kind", "this command needs a CBI model")
        return model.params
    return CbiParams.from_sigma2(args.beta, args.b, args.sigma2)


def _emit_rows(rows, out: Optional[str], name: str):
    if out:
        import os

        from .scenarios import write_csv

        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"{name}.csv")
        write_csv(path, rows)
        print(path)
        return
    print(",".join(CSV_COLUMNS))
    for r in rows:
        print(",".join(_fmt(v) for v in r))


def _report(sc: Scenario, result: ExperimentResult, out: Optional[str]) -> int:
    if not out:
        _emit_rows(result.rows, None, sc.name)
    print(json.dumps(_jsonable({"scenario": sc.name, "overall": result.overall,
                                "verdicts": result.verdicts, "summary": result.summary}),
                     indent=2), file=sys.stderr if not out else sys.stdout)
    return result.exit_code


def _cmd_list(args) -> int:
    for name, exp, desc in list_scenarios():
        print(f"{name:<24} {exp:<22} {desc}")
    return 0


def _cmd_check(args) -> int:
    rep = check_conditions(_cbi_from_args(args))
    print(json.dumps(_jsonable(rep.to_dict()), indent=2))
    return 0


def _cmd_flow(args) -> int:
    params = _cbi_from_args(args)
    times = np.linspace(0.0, args.horizon, args.points)
    sol = solve_v(params, args.lam, args.horizon, times)
    rows = [
        (float(t), transition_laplace(params, args.x, float(t), args.lam), 0.0, float(v))
        for t, v in zip(sol.grid, sol.v)
    ]
    # the bound column carries v_t(λ) here
    _emit_rows(rows, args.out, "flow")
    return 0


def _cmd_simulate(args) -> int:
    sc = _scenario(args)
    ens = simulate_ensemble(sc.model, args.x0, sc.sim)
    n = ens.values.shape[0]
    mean = ens.values.mean(axis=0)
    se = ens.values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    rows = [(float(t), float(m), float(s), math.nan) for t, m, s in zip(ens.times, mean, se)]
    _emit_rows(rows, args.out, f"{sc.name}-simulate")
    return 0


def _cmd_experiment(args) -> int:
    sc = _scenario(args)
    result = run_scenario(sc, args.out)
    return _report(sc, result, args.out or sc.output)


COMMANDS = {
    "list": _cmd_list,
    "check": _cmd_check,
    "flow": _cmd_flow,
    "simulate": _cmd_simulate,
    "ergodicity": _cmd_experiment,
    "fclt": _cmd_experiment,
    "run": _cmd_experiment,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConditionError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CbiLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
