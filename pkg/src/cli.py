"""
Command-line entry point: `python -m src.cli <command> --scenario <path> --out <dir>`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import config, plp, results
from .agents import AgentError
from .market import Infeasible, KKTViolation, MarketError, Unbounded, verify_kkt
from .netmodel import NetworkError
from .plp import PlanningError
from .protocol import NoConvergence, ProtocolError, run_clearing_round, write_transcript
from .results import ResultError
from .scenario import ScenarioConfig, ScenarioError, load_scenario

logger = logging.getLogger(__name__)

COMMANDS = ("plan-switches", "sweep-der", "run-mpc", "verify", "clear-step")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NOT_CONVERGED = 4


class UsageError(Exception):
    """Raised for malformed command lines."""


class VerificationFailed(Exception):
    """Raised when a stored run does not pass its KKT re-check."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        raise UsageError(message)


def parse_grid(text: str) -> List[float]:
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--grid expects a:b:step, got {text!r}") from None
    if step <= 0 or stop < start or start < 0:
        raise UsageError("--grid needs 0 <= a <= b and step > 0")
    count = int(round((stop - start) / step))
    return [float(v) for v in np.round(start + step * np.arange(count + 1), 10)]


def parse_range(text: str) -> Tuple[int, int]:
    try:
        low, high = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"--k-range expects a:b, got {text!r}") from None
    if low < 0 or high < low:
        raise UsageError("--k-range needs 0 <= a <= b")
    return low, high


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plpgrid", description="Peak-load-pricing distribution planning simulator")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--scenario", type=Path, default=config.SCENARIO_PATH)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--tolerance", type=float, default=None)
    parser.add_argument("--max-iters", type=int, default=None)
    parser.add_argument("--grid", type=str, default=None, help="DER capacity grid a:b:step (MW)")
    parser.add_argument("--k-range", type=str, default=None, help="switch counts a:b")
    parser.add_argument("--site", type=str, default=None, help="DER site for sweep-der")
    parser.add_argument("--epoch", type=int, default=None, help="investment epoch in steps for run-mpc")
    parser.add_argument("--horizon", type=int, default=None, help="MPC horizon in steps")
    parser.add_argument("--step", type=int, default=0, help="time step for clear-step")
    return parser


def _plan_switches(scenario: ScenarioConfig, run: results.RunDirectory, args: argparse.Namespace) -> Dict:
    k_range = parse_range(args.k_range) if args.k_range else None
    plans = plp.plan_switches(scenario, budget_count_range=k_range)
    metadata = results.table_metadata(scenario.digest, scenario.seed, args.command)
    results.write_table(results.switch_table(plans, metadata), run.file("plan_switches.csv"))
    best = min(plans, key=lambda r: (r.unit_price, r.count))
    results.write_json(
        {"k": best.count, "price": best.unit_price, "served": best.served, "plan": best.plan.to_dict()},
        run.file("best_plan.json"),
    )
    return {"rows": len(plans), "best_k": best.count, "best_price": best.unit_price}


def _sweep_der(scenario: ScenarioConfig, run: results.RunDirectory, args: argparse.Namespace) -> Dict:
    grid = parse_grid(args.grid) if args.grid else list(scenario.der_grid)
    if not scenario.der_sites:
        raise PlanningError("scenario has no DER sites")
    site = args.site or scenario.der_sites[0].id
    sweep = plp.sweep_der_capacity(scenario, site, grid)
    metadata = results.table_metadata(scenario.digest, scenario.seed, args.command)
    metadata["site"] = site
    results.write_table(results.der_table(sweep, metadata), run.file("sweep_der.csv"))
    optimum = plp.sweep_optimum(sweep)
    cheapest = plp.price_minimum(sweep)
    check = plp.verify_investment_kkt([plp.optimum_check(sweep, optimum, site, scenario.kappa_der())])
    results.write_json(
        {"welfare_optimum_K": optimum.plan.total_der, "price_minimum_K": cheapest.plan.total_der, "investment_kkt": check},
        run.file("sweep_summary.json"),
    )
    if not check["passed"]:
        raise VerificationFailed(
            f"capacity signal does not recover kappa at K={optimum.plan.total_der} "
            f"(residual {check['max_residual']:.3f})"
        )
    return {"rows": len(sweep), "price_minimum_K": cheapest.plan.total_der, "welfare_optimum_K": optimum.plan.total_der}


def _run_mpc(scenario: ScenarioConfig, run: results.RunDirectory, args: argparse.Namespace) -> Dict:
    mpc = plp.run_mpc(
        scenario,
        horizon=args.horizon,
        investment_epoch=args.epoch,
        der_grid=parse_grid(args.grid) if args.grid else None,
        tolerance=args.tolerance,
        max_iters=args.max_iters,
        strict=True,
    )
    metadata = results.table_metadata(scenario.digest, scenario.seed, args.command)
    table = results.step_table(
        mpc.results, [log.iterations for log in mpc.logs], [log.converged for log in mpc.logs], metadata
    )
    results.write_table(table, run.file("steps.csv"))
    results.write_clearings(((log.problem, r) for log, r in zip(mpc.logs, mpc.results)), run.file(results.CLEARINGS))
    write_transcript(mpc.logs, run.file(results.TRANSCRIPT))
    final = mpc.plans[-1] if mpc.plans else plp.InvestmentPlan()
    results.write_json({"final": final.to_dict(), "epochs": [p.to_dict() for p in mpc.plans]}, run.file("plans.json"))
    ledgers = plp.ledgers_for_run(scenario, mpc)
    results.write_json({name: ledger.to_dict() for name, ledger in ledgers.items()}, run.file("ledgers.json"))
    return {"steps": len(mpc.results), "switches": final.locations, "der_mw": final.total_der}


def _clear_step(scenario: ScenarioConfig, run: results.RunDirectory, args: argparse.Namespace) -> Dict:
    if not 0 <= args.step < scenario.horizon:
        raise UsageError(f"--step must lie in [0, {scenario.horizon})")
    agents = scenario.market_agents()
    context = scenario.step_context(args.step)
    result, log = run_clearing_round(
        agents,
        context,
        tolerance=scenario.price_tolerance if args.tolerance is None else args.tolerance,
        max_iters=scenario.max_iters if args.max_iters is None else args.max_iters,
        strict=True,
    )
    metadata = results.table_metadata(scenario.digest, scenario.seed, args.command)
    results.write_table(results.step_table([result], [log.iterations], [log.converged], metadata), run.file("steps.csv"))
    results.write_clearings([(log.problem, result)], run.file(results.CLEARINGS))
    write_transcript([log], run.file(results.TRANSCRIPT))
    results.write_json(result.to_dict(), run.file("clearing.json"))
    return {"lambda": result.duals.lam, "iterations": log.iterations, "converged": log.converged}


def _verify(run_path: Path) -> Dict:
    results.read_manifest(run_path)
    stored = results.find_clearings(run_path)
    if stored is None:
        raise ResultError(f"{run_path} holds no stored clearings to verify")
    worst = 0.0
    failures = []
    for problem, result in results.read_clearings(stored):
        report = verify_kkt(problem, result)
        worst = max(worst, report.max_residual)
        if not report.passed:
            failures.append({"step": problem.step, "violations": report.violations()})
    summary = {"max_residual": worst, "failures": failures}
    if failures:
        raise VerificationFailed(json.dumps(summary, sort_keys=True))
    return summary


HANDLERS = {
    "plan-switches": _plan_switches,
    "sweep-der": _sweep_der,
    "run-mpc": _run_mpc,
    "clear-step": _clear_step,
}


def run_command(command: str, scenario: Optional[ScenarioConfig], out: Path, args: argparse.Namespace) -> Dict:
    """Run one command against a loaded scenario and write its artefacts under `out`."""
    if command == "verify":
        return _verify(out)
    logger.info("%s on scenario %s (seed %d)", command, scenario.name, scenario.seed)
    with results.run_directory(out, command, scenario.digest, scenario.seed) as run:
        summary = HANDLERS[command](scenario, run, args)
        run.extra["summary"] = summary
    return summary


def exit_status(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NoConvergence, VerificationFailed, KKTViolation)):
        return EXIT_NOT_CONVERGED
    if isinstance(exc, (Infeasible, Unbounded, MarketError)):
        return EXIT_INFEASIBLE
    if isinstance(exc, (ScenarioError, ResultError, NetworkError, AgentError, PlanningError, ProtocolError)):
        return EXIT_VALIDATION
    return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args = build_parser().parse_args(argv)
        out = args.out or config.OUTPUT_DIR / args.command
        scenario = None
        if args.command != "verify":
            scenario = load_scenario(args.scenario)
            if args.seed is not None:
                scenario = scenario.with_seed(args.seed)
        summary = run_command(args.command, scenario, out, args)
    except (UsageError, VerificationFailed, ScenarioError, ResultError, NetworkError, AgentError,
            MarketError, PlanningError, ProtocolError) as exc:
        status = exit_status(exc)
        record = {"error": str(exc), "kind": type(exc).__name__, "status": status}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return status
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out), **summary}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
