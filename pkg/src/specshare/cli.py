"""Command-line entry point.

Subcommands: its, ldf, stationary, compare, dynamic, oracle, check.
Exit codes: 0 success; 1 the model reports infeasibility (an expected
outcome); 2 usage error; 3 an internal invariant was violated (a bug).
SPECSHARE_LOG in {error, info, debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import baselines, its as its_mod, ldf as ldf_mod, netmodel, policy as policy_mod
from .harness import ExperimentSpec, run_dynamic_spec, run_experiment
from .its import ItsInfeasibleError
from .ldf import LdfInvariantError
from .rng import UserStreams

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_USAGE = 2
EXIT_FAULT = 3

log = logging.getLogger("specshare")


def _setup_logging():
    level = os.environ.get("SPECSHARE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise SystemExit(f"SPECSHARE_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level],
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(payload: str, out: str | None):
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        sys.stdout.write(payload)


def _solve(args):
    net, sensing = netmodel.load_config(args.config)
    criterion = its_mod.make_criterion(args.criterion)
    if args.monitoring == "signal":
        constants = its_mod.feasibility_constants(
            net, sensing, net.min_rates * net.n_users)
    else:
        constants = its_mod.obedient_constants(net)
    if not constants.feasible:
        raise ItsInfeasibleError(f"constants infeasible ({constants.failure})",
                                 report=constants.to_json())
    solution = its_mod.its_solve(net, criterion=criterion,
                                 precision=args.precision, constants=constants)
    return net, sensing, constants, solution


def cmd_its(args) -> int:
    _, _, constants, solution = _solve(args)
    report = solution.to_json()
    report.update({"delta_min": constants.delta_min,
                   "mu_lower": constants.mu_lower.tolist(),
                   "b_matrix": None if constants.b is None else constants.b.tolist()})
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_ldf(args) -> int:
    net, sensing, constants, solution = _solve(args)
    rng = UserStreams(args.seed, net.n_users, 7)
    run = ldf_mod.run_ldf(net, sensing if args.monitoring == "signal" else None,
                          solution, constants, args.horizon,
                          rng if args.monitoring == "signal" else None,
                          mode=args.monitoring)
    metrics = policy_mod.discounted_metrics(run.trace, net.discount)
    if args.format == "jsonl" or args.out:
        _emit(run.decisions_jsonl(), args.out)
    sys.stdout.write(json.dumps({"metrics": metrics.to_json(),
                                 "seed": args.seed}, indent=2) + "\n")
    return EXIT_OK


def cmd_stationary(args) -> int:
    net, _ = netmodel.load_config(args.config)
    sol = baselines.stationary_solve(net)
    _emit(json.dumps(sol.to_json(), indent=2) + "\n", args.out)
    if not sol.feasible:
        log.info("stationary policy infeasible: %s", sol.reason)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_compare(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = ExperimentSpec.from_json(json.load(fh))
    result = run_experiment(spec, threads=args.threads)
    out = args.out or "comparison"
    with open(f"{out}.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(result.to_csv())
    with open(f"{out}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(result.manifest(), fh, indent=2)
    sys.stdout.write(f"wrote {out}.csv and {out}.manifest.json\n")
    return EXIT_OK


def cmd_dynamic(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = ExperimentSpec.from_json(json.load(fh))
    result, report = run_dynamic_spec(spec)
    payload = {"epochs": [e.to_json() for e in result.epochs],
               "bound_holds": report.holds,
               "worst_slack": report.worst_slack,
               "telescoping_ok": report.telescoping_ok}
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    if not (report.holds and report.telescoping_ok):
        raise LdfInvariantError("epoch-wise convergence bound failed")
    return EXIT_OK


def cmd_oracle(args) -> int:
    net, _ = netmodel.load_config(args.config)
    if args.rates:
        r_star = np.asarray([float(v) for v in args.rates.split(",")])
    else:
        solution = its_mod.its_solve(net, constants=its_mod.obedient_constants(net),
                                     precision=args.precision)
        r_star = solution.r_star
    res = baselines.optimal_schedule_oracle(net, net.discount, r_star, args.horizon)
    payload = {"prefix": res.witness, "optimal_count": res.optimal_count,
               "ambiguous": res.ambiguous, "optimal_energy": res.optimal_energy}
    if args.verify:
        payload["verify"] = {
            "prefix": args.verify,
            "optimal": res.is_optimal(args.verify),
            "optimal_up_to_relabeling": res.is_optimal_up_to_relabeling(args.verify)}
    _emit(json.dumps(payload, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_check(args) -> int:
    """Quick invariant battery: conservation, bounds, convexity, oracle."""
    from . import checks
    failures = checks.run_all(verbose=True)
    if failures:
        for name, msg in failures:
            sys.stderr.write(f"FAIL {name}: {msg}\n")
        return EXIT_FAULT
    sys.stdout.write("all invariant checks passed\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specshare",
                                 description="energy-efficient TDMA spectrum sharing")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="network JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--horizon", type=int, default=500)
        p.add_argument("--precision", type=float, default=1e-9,
                       help="rate-selection stopping precision")
        p.add_argument("--out", default=None, help="write the report here")
        p.add_argument("--format", choices=("csv", "json", "jsonl"), default="json")

    p = sub.add_parser("its", help="solve for the optimal instantaneous rates")
    common(p)
    p.add_argument("--criterion", choices=("weighted-sum", "prop-fair"),
                   default="weighted-sum")
    p.add_argument("--monitoring", choices=("perfect", "signal"), default="signal")
    p.set_defaults(fn=cmd_its)

    p = sub.add_parser("ldf", help="run the scheduler and report metrics")
    common(p)
    p.add_argument("--criterion", choices=("weighted-sum", "prop-fair"),
                   default="weighted-sum")
    p.add_argument("--monitoring", choices=("perfect", "signal"), default="signal")
    p.set_defaults(fn=cmd_ldf)

    p = sub.add_parser("stationary", help="solve the optimal stationary policy")
    common(p)
    p.set_defaults(fn=cmd_stationary)

    p = sub.add_parser("compare", help="run an experiment spec")
    p.add_argument("--spec", required=True, help="experiment JSON file")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None, help="output path prefix")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("dynamic", help="run a scripted entry/exit scenario")
    p.add_argument("--spec", required=True, help="experiment JSON file")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dynamic)

    p = sub.add_parser("oracle", help="exhaustive optimal-prefix search")
    common(p)
    p.add_argument("--rates", default=None,
                   help="comma-separated instantaneous rates (default: solve)")
    p.add_argument("--verify", default=None,
                   help="also verify this prefix for optimality")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ItsInfeasibleError as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        if getattr(exc, "report", None):
            sys.stderr.write(json.dumps(exc.report, indent=2) + "\n")
        return EXIT_INFEASIBLE
    except baselines.NpfInfeasibleError as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except LdfInvariantError as exc:
        sys.stderr.write(f"invariant fault: {exc}\n")
        return EXIT_FAULT
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
