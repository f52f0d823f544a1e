"""Command-line entry points: price, solve, simulate, metrics, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .core import LoadProfile, write_profile_csv
from .pricing import DiscountSchedule, price_menu
from .qp import QpInstance, SolverTolerances, dump_debug, load_instance, solve_relaxed
from .simulator import (
    POLICIES,
    FleetScenario,
    default_baseline_path,
    load_baseline,
    run_policy,
)


def _cmd_price(args: argparse.Namespace) -> int:
    from decimal import Decimal

    schedule = DiscountSchedule(Decimal(str(args.pmax)), args.smax)
    rows = price_menu(args.energy_kwh, args.max_rate_kw, args.deadline_h, schedule)
    print(json.dumps([r.to_dict() for r in rows], indent=2))
    return 0


def _cmd_solve(args: argparse.Namespace) -> int:
    instance = load_instance(args.instance)
    solution = solve_relaxed(instance, SolverTolerances())
    if args.out:
        dump_debug(args.out, instance, solution)
    print(
        json.dumps(
            {
                "objective_value": solution.objective_value,
                "kkt_residual_kw": solution.kkt_residual_kw,
                "iterations": solution.iterations,
                "converged": solution.converged,
            },
            indent=2,
        )
    )
    return 0 if solution.converged else 1


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = FleetScenario.from_json(Path(args.scenario).read_text())
    baseline_path = args.baseline or default_baseline_path()
    baseline = load_baseline(baseline_path, args.target_peak_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policies = list(POLICIES) if args.policy == "all" else [args.policy]
    for policy in policies:
        result = run_policy(scenario, policy, baseline)
        write_profile_csv(out / f"{policy}_aggregate.csv", result.aggregate)
        (out / f"{policy}_outcomes.json").write_text(
            json.dumps([o.to_dict() for o in result.outcomes], indent=2)
        )
        peak = result.aggregate.peak_kw
        print(f"{policy}: peak {peak:.1f} kW, {len(result.outcomes)} sessions")
    write_profile_csv(out / "baseline.csv", run_policy(scenario, "unmanaged", baseline).baseline)
    return 0


def _cmd_metrics(args: argparse.Namespace) -> int:
    from .core import read_profile_csv
    from .simulator import SessionOutcome

    run_dir = Path(args.run_dir)
    aggregates: dict[str, LoadProfile] = {}
    outcomes: dict[str, list[SessionOutcome]] = {}
    for policy in POLICIES:
        agg_path = run_dir / f"{policy}_aggregate.csv"
        out_path = run_dir / f"{policy}_outcomes.json"
        if not agg_path.exists():
            continue
        aggregates[policy] = read_profile_csv(agg_path)
        outcomes[policy] = [
            SessionOutcome(**o) for o in json.loads(out_path.read_text())
        ]
    if not aggregates:
        print(f"no policy outputs found in {run_dir}", file=sys.stderr)
        return 1
    baseline_path = run_dir / "baseline.csv"
    if baseline_path.exists():
        baseline_peak = read_profile_csv(baseline_path).peak_kw
    else:
        baseline_peak = args.baseline_peak_kw
    metrics_mod.write_metrics_dir(args.out, aggregates, outcomes, baseline_peak)
    print(f"wrote metrics to {args.out}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import CoordinationService, ServiceConfig, create_app

    if args.config:
        config = ServiceConfig.from_file(args.config)
    else:
        config = ServiceConfig()
    config = config.apply_env()
    if args.clock:
        config.clock_mode = args.clock
    service = CoordinationService(config, log_path=args.log)
    if config.clock_mode in ("realtime", "accelerated"):
        service.clock_control(config.clock_mode, config.clock_factor)
    app = create_app(service)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexcharge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("price", help="quote a deadline menu for one request")
    p.add_argument("--energy-kwh", type=float, required=True)
    p.add_argument("--max-rate-kw", type=float, required=True)
    p.add_argument("--deadline-h", type=float, nargs="+", required=True)
    p.add_argument("--pmax", type=float, default=0.043)
    p.add_argument("--smax", type=float, default=10.0)
    p.set_defaults(func=_cmd_price)

    p = sub.add_parser("solve", help="solve a QP instance from a JSON file")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", help="write an instance+solution debug dump")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("simulate", help="run policies over a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy", default="all", choices=("all",) + POLICIES)
    p.add_argument("--baseline", help="daily baseline CSV (default: packaged shape)")
    p.add_argument("--target-peak-kw", type=float, default=120.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("metrics", help="compute metrics from a simulate run directory")
    p.add_argument("--in", dest="run_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-peak-kw", type=float, default=120.0)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("serve", help="run the coordination service")
    p.add_argument("--config", help="service config JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8714)
    p.add_argument("--clock", choices=("step", "realtime", "accelerated"))
    p.add_argument("--log", help="event log path (JSON lines)")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
