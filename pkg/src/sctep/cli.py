"""Command-line interface: validate cases, run single solves, screen options,
run or resume coalitional games, and export report data.

Exit codes: 0 success, 1 domain/validation/solver failure, 2 I/O or usage
error. All artifacts are JSON (or CSV for report tables) with a metadata
header so every number is traceable to a case hash and solver settings.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .network import (CaseFormatError, CaseValidationError, load_case, case_hash,
                      validate_case)
from .formulation import build_nlp, dump_problem_text
from .solver import SolverSettings, solve, summarize_solution
from .game import (AVOIDED_CURTAILMENT, EXPECTED_COST_REDUCTION, GameResult,
                   run_full_game, screen_options, shapley_sampled)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2

_OBJECTIVE_METRIC = {
    "curtailment": AVOIDED_CURTAILMENT,
    "cost": EXPECTED_COST_REDUCTION,
}


def _meta(case, settings: SolverSettings | None = None) -> dict:
    meta = {"tool": f"sctep {__version__}", "case_name": case.name,
            "case_hash": case_hash(case)}
    if settings is not None:
        meta["settings"] = settings.key()
    return meta


def _write_json(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _csv_meta(meta: dict, **extra) -> str:
    """Comment header carried by CSV artifacts (tool, case hash, settings)."""
    fields = {"tool": meta["tool"], "case_name": meta["case_name"],
              "case_hash": meta["case_hash"], **extra}
    return "# " + " ".join(f"{k}={v}" for k, v in fields.items()) + "\n"


def _load(path: str):
    return load_case(path)


def cmd_validate(args) -> int:
    try:
        case = load_case(args.case)
    except CaseValidationError as exc:
        for d in exc.diagnostics:
            print(f"error [{d.code}]: {d.message}")
        return EXIT_DOMAIN
    except CaseFormatError as exc:
        print(f"error [format]: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    diags = validate_case(case)
    for d in diags:
        print(f"{d.severity} [{d.code}]: {d.message}")
    if any(d.is_error for d in diags):
        return EXIT_DOMAIN
    print(f"{case.name}: ok ({len(case.buses)} buses, {len(case.lines)} lines, "
          f"{len(case.scenarios)} scenarios, {len(case.states)} states, "
          f"{len(case.options)} options)")
    return EXIT_OK


def _parse_coalition(case, spec: str) -> frozenset[int]:
    if spec == "all":
        return frozenset(o.id for o in case.options)
    if spec == "none":
        return frozenset()
    try:
        ids = frozenset(int(tok) for tok in spec.split(",") if tok.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"--coalition must be 'all', 'none' or comma-separated ids, got {spec!r}")
    return ids


def _settings_from(args) -> SolverSettings:
    kw = {}
    if getattr(args, "kkt_tol", None) is not None:
        kw["kkt_tol"] = args.kkt_tol
    if getattr(args, "feas_tol", None) is not None:
        kw["feas_tol"] = args.feas_tol
    if getattr(args, "max_iter", None) is not None:
        kw["max_iter"] = args.max_iter
    return SolverSettings(**kw)


def cmd_solve(args) -> int:
    case = _load(args.case)
    settings = _settings_from(args)
    enabled = _parse_coalition(case, args.coalition)
    problem = build_nlp(case, enabled, args.objective)
    if args.dump_nlp:
        Path(args.dump_nlp).write_text(dump_problem_text(problem))
    result = solve(problem, settings)
    summary = summarize_solution(problem, result)

    unit = "MW" if args.objective == "curtailment" else "EUR/h"
    print(f"status: {result.status}")
    print(f"objective ({args.objective}): {result.objective:.4f} {unit}")
    if args.objective == "cost":
        print(f"  = {result.objective / 1e6:.4f} mln EUR/h")
    print("line reinforcement (MVA):")
    for lid, mva in summary["line_reinforcement_mva"].items():
        ln = case.lines[case.line_index[lid]]
        print(f"  line {ln.from_bus}-{ln.to_bus}: {mva:8.2f}")
    print("flexibility capacity (MW):")
    for fid, mw in summary["flex_capacity_mw"].items():
        fx = case.flex_providers[case.flex_index[fid]]
        print(f"  bus {fx.bus}: {mw:8.2f}")
    print("curtailment per (scenario, state): LC MW / RC MW")
    for row in summary["curtailment"]:
        print(f"  s{row['scenario']} k{row['state']}: {row['lc_mw']:10.3f} / {row['rc_mw']:10.3f}")

    if args.out:
        lay = problem.layout
        doc = {
            "meta": dict(_meta(case, settings), objective=args.objective,
                         coalition=sorted(enabled)),
            "status": result.status,
            "objective": result.objective,
            "kkt": result.kkt,
            "iterations": result.iterations,
            "wall_time": result.wall_time,
            "summary": summary,
            "variables": {lay.var_names[i]: float(result.x[i]) for i in range(problem.n_var)},
        }
        _write_json(args.out, doc)
        print(f"wrote {args.out}")
    return EXIT_OK if result.is_optimal else EXIT_DOMAIN


def cmd_screen(args) -> int:
    case = _load(args.case)
    settings = _settings_from(args)
    metric = _OBJECTIVE_METRIC[args.objective]
    entries = screen_options(case, metric, settings, workers=args.workers)
    unit = "MW" if args.objective == "curtailment" else "EUR/h"
    print(f"{'rank':>4} {'option':>6}  {'label':14s} {'v({i}) ' + unit:>18}  status")
    for rank, e in enumerate(entries, start=1):
        print(f"{rank:>4} {e.option_id:>6}  {e.label:14s} {e.value:18.4f}  {e.status}")
    kept = [e.option_id for e in entries[:args.top]] if args.top else None
    if args.keep:
        if kept is None:
            print("--keep requires --top", file=sys.stderr)
            return EXIT_USAGE
        _write_json(args.keep, {"meta": dict(_meta(case, settings), metric=metric),
                                "players": kept})
        print(f"wrote {args.keep} ({len(kept)} players)")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(_csv_meta(_meta(case, settings), metric=metric))
            wr = csv.writer(fh)
            wr.writerow(["rank", "option_id", "label", "value", "status"])
            for rank, e in enumerate(entries, start=1):
                wr.writerow([rank, e.option_id, e.label, repr(e.value), e.status])
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_game(args) -> int:
    case = _load(args.case)
    settings = _settings_from(args)
    metric = _OBJECTIVE_METRIC[args.objective]
    if args.players == "all":
        players = None
    else:
        doc = json.loads(Path(args.players).read_text())
        players = tuple(int(p) for p in (doc["players"] if isinstance(doc, dict) else doc))
    try:
        if args.sample is not None:
            result = shapley_sampled(case, metric, m=args.sample, seed=args.seed,
                                     settings=settings, players=players,
                                     workers=args.workers, run_dir=args.run_dir)
        else:
            result = run_full_game(case, metric, settings=settings, players=players,
                                   workers=args.workers, run_dir=args.run_dir)
    except RuntimeError as exc:
        print(f"game failed: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    doc = result.to_dict()
    _write_json(args.out, doc)

    unit = "MW" if args.objective == "curtailment" else "EUR/h"
    print(f"game over {result.n_players} players, metric {metric} ({unit}), "
          f"{len(result.values)} coalition values")
    print(f"v(grand) = {result.grand_value():.4f}, sum of Shapley = {result.shapley.sum():.4f}")
    order = np.argsort(-result.shapley)
    for i in order:
        se = ""
        if result.standard_errors is not None:
            se = f"  (se {result.standard_errors[i]:.3f})"
        print(f"  {result.labels[i]:14s} Shapley {result.shapley[i]:12.4f}{se}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        doc = json.loads(Path(args.game).read_text())
        result = GameResult.from_dict(doc)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"not a game artifact: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    if not result.mc_samples or not any(result.mc_samples):
        print("game artifact has no marginal-contribution samples", file=sys.stderr)
        return EXIT_DOMAIN
    if args.format == "csv":
        with open(args.out, "w", newline="") as fh:
            fh.write(_csv_meta({"tool": f"sctep {__version__}",
                                "case_name": result.case_name,
                                "case_hash": result.case_hash},
                               metric=result.metric,
                               estimator=result.estimator["kind"]))
            wr = csv.writer(fh)
            wr.writerow(["player", "player_label", "coalition_size", "mc_value"])
            for i, samples in enumerate(result.mc_samples):
                for mask, mc in samples:
                    wr.writerow([result.players[i], result.labels[i],
                                 bin(mask).count("1"), repr(mc)])
        print(f"wrote {args.out}")
    else:
        bundle = {
            "meta": {"tool": f"sctep {__version__}", "case_name": result.case_name,
                     "case_hash": result.case_hash, "metric": result.metric,
                     "estimator": result.estimator, "settings": result.settings},
            "players": [
                {
                    "id": result.players[i],
                    "label": result.labels[i],
                    "shapley": float(result.shapley[i]),
                    "individual": float(result.individual[i]),
                    "grand_marginal": float(result.grand_marginal[i]),
                    "standard_error": (None if result.standard_errors is None
                                       else float(result.standard_errors[i])),
                    "mc_distribution": [[int(m), float(v)]
                                        for m, v in result.mc_samples[i]],
                }
                for i in range(result.n_players)
            ],
            "baseline_objective": result.baseline_objective,
            "grand_value": result.grand_value(),
        }
        _write_json(args.out, bundle)
        print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sctep",
        description="Security-constrained transmission expansion planning with "
                    "coalitional valuation of investment options")
    parser.add_argument("--version", action="version", version=f"sctep {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    default_workers = int(os.environ.get("SCTEP_WORKERS", "1"))

    p = sub.add_parser("validate", help="validate a case file")
    p.add_argument("case")
    p.set_defaults(func=cmd_validate)

    def add_solver_flags(p):
        p.add_argument("--kkt-tol", type=float, default=None)
        p.add_argument("--feas-tol", type=float, default=None)
        p.add_argument("--max-iter", type=int, default=None)

    p = sub.add_parser("solve", help="solve one planning problem")
    p.add_argument("case")
    p.add_argument("--objective", choices=("curtailment", "cost"), required=True)
    p.add_argument("--coalition", default="all",
                   help="'all', 'none', or comma-separated option ids")
    p.add_argument("--out", default=None, help="write full solution JSON here")
    p.add_argument("--dump-nlp", default=None, help="write plain-text NLP dump here")
    add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("screen", help="rank options by individual value")
    p.add_argument("case")
    p.add_argument("--objective", choices=("curtailment", "cost"), required=True)
    p.add_argument("--top", type=int, default=None, help="keep the K best options")
    p.add_argument("--keep", default=None, help="write kept player ids (JSON) here")
    p.add_argument("--out", default=None, help="write the ranking as CSV here")
    p.add_argument("--workers", type=int, default=default_workers)
    add_solver_flags(p)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("game", help="run or resume a coalitional game")
    p.add_argument("case")
    p.add_argument("--objective", choices=("curtailment", "cost"), required=True)
    p.add_argument("--players", default="all", help="'all' or a kept-player JSON file")
    est = p.add_mutually_exclusive_group()
    est.add_argument("--exact", action="store_true", default=True,
                     help="evaluate all 2^N coalitions (default)")
    est.add_argument("--sample", type=int, default=None, metavar="M",
                     help="permutation-sampling with M permutations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=default_workers)
    p.add_argument("--run-dir", default=None,
                   help="journal directory (enables incremental persistence and resume)")
    p.add_argument("--resume", action="store_true",
                   help="continue from an existing journal in --run-dir")
    p.add_argument("--out", default="game.json")
    add_solver_flags(p)
    p.set_defaults(func=cmd_game)

    p = sub.add_parser("report", help="export game results as CSV/JSON")
    p.add_argument("game", help="game artifact (JSON) produced by 'sctep game'")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except IsADirectoryError as exc:
        print(f"not a file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except argparse.ArgumentTypeError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (CaseFormatError, CaseValidationError) as exc:
        print(f"invalid case: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
