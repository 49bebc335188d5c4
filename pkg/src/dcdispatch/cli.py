"""Command-line pipeline: cluster -> optimize -> simulate -> sweep -> report.

All outputs are CSV or JSON with documented columns; every command writes a
manifest recording the inputs, flags and seeds it ran with.  Exit codes:
0 success, 2 validation error, 3 infeasible instance, 4 solver hit a limit
but returned an incumbent.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .carbon import total_cost
from .clustering import cluster_scenario
from .milp import (BuildError, InfeasibleError, Mode, SolveLimits,
                   build_model, export_model, solve)
from .milp.model import DispatchSolution
from .scenario import ScenarioError, load_scenario
from .simulate import monte_carlo, strip_backups

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_LIMIT = 4


def _sha256(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, args_dict, scenario_path):
    manifest = {
        "tool": "dcdispatch",
        "version": __version__,
        "command": command,
        "args": {k: v for k, v in sorted(args_dict.items())
                 if not k.startswith("_") and k != "func"},
        "scenario": str(scenario_path),
        "scenario_sha256": _sha256(scenario_path),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def _out_dir(args, default):
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_cluster(args):
    scenario = load_scenario(args.scenario)
    out = _out_dir(args, "out-cluster")
    clusters_by_dc = cluster_scenario(scenario)

    rows = []
    for dc_id, clusters in clusters_by_dc.items():
        for cl in clusters:
            rows.append([cl.id, dc_id, cl.group_kind.value, cl.n_servers,
                         f"{cl.centroid_past_calendar_days:.3f}",
                         f"{cl.centroid_past_operating_days:.3f}",
                         f"{cl.c_manufacture:.3f}", f"{cl.beta:.3f}"])
    _write_csv(out / "clusters.csv",
               ["id", "dc", "group", "n", "centroid_pc_days",
                "centroid_po_days", "c_manufacture_kg", "beta"], rows)

    # per-server scatter data for the clustering plot
    rows = []
    for dc in scenario.dcs:
        fleet = dc.resolve_fleet()
        for rec in fleet:
            rows.append([dc.id, f"{rec.past_operating_days:.2f}",
                         f"{rec.past_calendar_days:.2f}",
                         int(rec.degraded_flag)])
    _write_csv(out / "servers.csv",
               ["dc", "po_days", "pc_days", "degraded"], rows)

    write_manifest(out, "cluster", vars(args), args.scenario)
    print(f"wrote {out}/clusters.csv ({sum(len(c) for c in clusters_by_dc.values())} "
          f"clusters over {len(scenario.dcs)} DCs)")
    return EXIT_OK


def _solve_scenario(scenario, mode, u, args):
    clusters_by_dc = cluster_scenario(scenario)
    model = build_model(scenario, clusters_by_dc, u, mode)
    limits = SolveLimits(time_s=args.time_limit, mip_gap=args.mip_gap)
    solution = solve(model, limits=limits)
    return clusters_by_dc, model, solution


def _write_solution(out, scenario, model, solution, export_mps=False):
    (out / "solution.json").write_text(
        json.dumps(solution.as_dict(), indent=1))
    breakdown = total_cost(solution, scenario)
    (out / "costs.json").write_text(json.dumps(breakdown.as_dict(), indent=2))
    if export_mps:
        export_model(model, out / "model.mps", "mps")
    return breakdown


def cmd_optimize(args):
    scenario = load_scenario(args.scenario)
    mode = Mode.parse(args.mode)
    u = args.u if args.u is not None else scenario.utilization_default
    out = _out_dir(args, f"out-optimize-{mode.value}-u{u}")
    _, model, solution = _solve_scenario(scenario, mode, u, args)
    breakdown = _write_solution(out, scenario, model, solution,
                                export_mps=args.export_mps)
    write_manifest(out, "optimize", vars(args), args.scenario)
    print(f"mode={mode.value} u={u} status={solution.status} "
          f"gap={solution.mip_gap:.2e}")
    print(f"operating={breakdown.operating_kg:.1f} kg  "
          f"embodied={breakdown.embodied_kg:.1f} kg  "
          f"total=${breakdown.total:.2f}")
    print(f"backup share={solution.backup_share():.3f}")
    return EXIT_LIMIT if solution.status == "limit" else EXIT_OK


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    if args.trials < 1:
        raise ScenarioError("--trials must be >= 1")
    solution = DispatchSolution.from_dict(
        json.loads(Path(args.solution).read_text()))
    out = _out_dir(args, "out-simulate")

    report = monte_carlo(solution, scenario, n_trials=args.trials,
                         seed=args.seed)
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2))

    rows = []
    for di, dc_id in enumerate(solution.dc_ids):
        for t in range(24):
            rows.append([dc_id, t,
                         f"{report.per_hour_violations[di, t]:.6f}"])
    _write_csv(out / "violations_hourly.csv",
               ["dc", "hour", "violated_fraction"], rows)

    lines = [f"trials={report.n_trials}",
             f"sla_violation_rate={report.sla_violation_rate:.6f}",
             f"violation_rate_hours={report.violation_rate_hours:.6f}",
             f"dropped_workload={report.dropped_workload:.3f}"]
    if args.strip_backups:
        stripped = strip_backups(solution)
        report_nb = monte_carlo(stripped, scenario, n_trials=args.trials,
                                seed=args.seed)
        (out / "report_no_backups.json").write_text(
            json.dumps(report_nb.as_dict(), indent=2))
        lines.append(
            f"sla_violation_rate_without_backups="
            f"{report_nb.sla_violation_rate:.6f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")

    write_manifest(out, "simulate", vars(args), args.scenario)
    print("\n".join(lines))
    return EXIT_OK


def cmd_sweep(args):
    scenario = load_scenario(args.scenario)
    u_list = [float(tok) for tok in args.u_list.split(",")]
    out = _out_dir(args, "out-sweep")
    mode = Mode.parse(args.mode)

    rows = []
    intensity_rows = []
    for u in u_list:
        clusters_by_dc, model, solution = _solve_scenario(
            scenario, mode, u, args)
        breakdown = total_cost(solution, scenario)
        report = monte_carlo(solution, scenario, clusters_by_dc,
                             n_trials=args.trials, seed=args.seed)
        primary_hours = sum(int(a.sum()) for a in solution.n_primary)
        active_hours = sum(int(a.sum()) for a in solution.n_active)
        rows.append([u, f"{breakdown.operating_kg:.2f}",
                     f"{breakdown.embodied_kg:.2f}",
                     f"{breakdown.operating_kg + breakdown.embodied_kg:.2f}",
                     f"{report.sla_violation_rate:.6f}",
                     primary_hours, active_hours,
                     f"{solution.backup_share():.4f}",
                     solution.status, f"{solution.mip_gap:.2e}"])
        # embodied-intensity curve samples per cluster (kg per server-day
        # consumed, as a function of the dispatched day fraction)
        for di, dc_id in enumerate(solution.dc_ids):
            for ref in solution.cluster_refs[di]:
                for frac in (0.25, 0.5, 0.75, 1.0):
                    x = frac * ref.n_servers
                    denom = ref.t_pc * x + ref.t_fo * ref.n_servers
                    intensity_rows.append(
                        [u, dc_id, ref.cluster_id, frac,
                         f"{ref.c_manufacture * x / denom:.6f}"])

    _write_csv(out / "sweep.csv",
               ["u", "operating_kg", "embodied_kg", "total_kg",
                "sla_violation_rate", "primary_server_hours",
                "active_server_hours", "backup_share", "status", "mip_gap"],
               rows)
    _write_csv(out / "embodied_intensity.csv",
               ["u", "dc", "cluster", "dispatch_fraction",
                "kg_per_server_day"], intensity_rows)
    write_manifest(out, "sweep", vars(args), args.scenario)
    for row in rows:
        print(f"u={row[0]}: total={row[3]} kg, violations={row[4]}, "
              f"active_server_hours={row[6]}")
    return EXIT_OK


def cmd_report(args):
    out = Path(args.out_dir or ".")
    pieces = []
    for name in ("costs.json", "report.json", "sweep.csv"):
        for found in sorted(out.rglob(name)):
            pieces.append(f"== {found} ==")
            pieces.append(found.read_text().strip())
    if not pieces:
        print(f"no dcdispatch outputs found under {out}", file=sys.stderr)
        return EXIT_VALIDATION
    print("\n".join(pieces))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dcdispatch",
        description="Carbon- and reliability-aware data center dispatch "
                    "planning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True,
                           help="scenario JSON file")
        p.add_argument("--out-dir", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("cluster", help="group fleets into server clusters")
    common(p)
    p.set_defaults(func=cmd_cluster)

    def solver_flags(p):
        p.add_argument("--mode", default="proposed",
                       choices=["m1", "m2", "proposed"])
        p.add_argument("--time-limit", type=float, default=120.0,
                       help="seconds per solve")
        p.add_argument("--mip-gap", type=float, default=0.01)

    p = sub.add_parser("optimize", help="build and solve the dispatch MILP")
    common(p)
    solver_flags(p)
    p.add_argument("--u", type=float, default=None,
                   help="utilization (default: scenario's)")
    p.add_argument("--export-mps", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="Monte Carlo failure injection")
    common(p)
    p.add_argument("--solution", required=True, help="solution.json path")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--strip-backups", action="store_true",
                   help="also simulate the plan with backups removed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="optimize+simulate over utilizations")
    common(p)
    solver_flags(p)
    p.add_argument("--u-list", default="0.5,0.6,0.7")
    p.add_argument("--trials", type=int, default=200)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="collect outputs under a directory")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BuildError as exc:
        print(f"infeasible instance: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
