"""Command-line entry point: ``onoffsa {dp,check,optimize,experiment}``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .estimator import ExactEstimator
from .experiments import (
    SCENARIOS,
    build_scenario,
    load_config,
    run_experiment,
    run_method,
    solve_dp,
    structural_checks,
    write_trace,
)
from .mdp import StructureError
from .sa import METHODS


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="onoffsa", description="On-off transmission control: DP baseline, "
                                "structure checks and stochastic-approximation threshold search.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("dp", "solve the MDP and print the optimal thresholds"),
                        ("check", "run the structural checks; nonzero exit if any fails"),
                        ("optimize", "run SA for the selected method(s) and one seed"),
                        ("experiment", "DP, checks and SA over all configured methods and seeds")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--scenario", choices=SCENARIOS, help="preset scenario (overrides the file)")
        sp.add_argument("--seed", type=int, help="root seed (optimize: the run seed; experiment: single seed)")
        sp.add_argument("--method", choices=METHODS + ("all",), help="SA method")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--oracle", action="store_true", help="record exact-objective metrics in traces")
    return p


def _config(args):
    over = {}
    if args.scenario:
        over["scenario"] = args.scenario
    cfg = load_config(args.config, **over) if args.config else load_config(**over)
    upd = {}
    if args.seed is not None:
        upd["seeds"] = (args.seed,)
    if args.method:
        upd["methods"] = METHODS if args.method == "all" else (args.method,)
    if args.out:
        upd["out"] = args.out
    if args.oracle:
        upd["oracle"] = True
    return replace(cfg, **upd) if upd else cfg


def cmd_dp(cfg) -> int:
    scenario = build_scenario(cfg)
    dp = solve_dp(scenario, cfg.epsilon)
    out = {"scenario": cfg.scenario, "dim": scenario.dim, "states": [p.mdp.n_states for p in scenario.parts],
           "iterations": dp.iterations, "theta_star": dp.theta_star.tolist(), "j_star": dp.j_star,
           "v_sum": dp.v_sum, "rel_gap": dp.rel_gap, "never_transmit_lines": dp.never_transmit}
    print(json.dumps(out, indent=2))
    return 0


def cmd_check(cfg) -> int:
    scenario = build_scenario(cfg)
    dp = solve_dp(scenario, cfg.epsilon)
    checks = structural_checks(scenario, dp)
    failed = 0
    for name, rep in checks.items():
        ok = rep.get("passed", rep.get("matches_dp", True))
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {json.dumps(rep)}")
    return 1 if failed else 0


def cmd_optimize(cfg) -> int:
    scenario = build_scenario(cfg)
    theta_star = exact = None
    if cfg.oracle:
        theta_star = solve_dp(scenario, cfg.epsilon).theta_star
        exact = ExactEstimator(scenario)
    out = Path(cfg.out)
    for method in cfg.methods:
        for seed in cfg.seeds:
            tr = run_method(cfg, scenario, method, seed, theta_star, exact)
            path = out / f"trace_{method}_seed{seed}.csv"
            write_trace(tr, path)
            msg = f"{method} seed {seed}: A={tr.meta['A']:.6g} final={tr.final.tolist()}"
            if tr.norm_err is not None:
                msg += f" J={tr.j_rounded[-1]:.8g} norm_err={tr.norm_err[-1]:.4f}"
            print(msg + f" -> {path}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "dp":
            return cmd_dp(cfg)
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        report = run_experiment(cfg)
        print(f"report written to {Path(cfg.out) / 'report.json'} ({report['seconds']:.1f} s)")
        return 0
    except StructureError as exc:
        print(f"structural check failed: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
