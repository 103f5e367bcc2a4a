"""Command line: ``ezinvest {check,solve,simulate,horizon} --config run.json``.

Exit codes: 0 success, 1 condition or check failure, 2 configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .market import EZPreferences, check_conditions, make_model
from .policy import extract_policy
from .simulate import (
    OptimalPolicy,
    PathPlan,
    PerturbedPolicy,
    martingale_budget_check,
    simulate_state,
    simulate_wealth,
    supermartingale_value_check,
)
from .solver import SolverError, _g17, apriori_lower_bound, make_grid, solve_value_pde, stationary_consumption_limit

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("ezinvest")


def _out_dir(cfg: RunConfig, args) -> Path:
    p = Path(args.out or cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sim = cfg.simulation
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.paths is not None:
        changes["paths"] = args.paths
    if args.dt is not None:
        changes["dt"] = args.dt
    if changes:
        try:
            sim = dataclasses.replace(sim, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cfg = dataclasses.replace(cfg, simulation=sim)
    return cfg


def _model(cfg):
    try:
        return make_model(cfg.model)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def cmd_check(cfg: RunConfig, args) -> int:
    try:
        report = check_conditions(cfg.model, cfg.preferences)
    except ValueError as exc:
        print(f"conditions not applicable: {exc}")
        return EXIT_FAIL
    print(report.to_text())
    if args.out:
        (_out_dir(cfg, args) / "check.json").write_text(report.to_json())
    return EXIT_OK if report.passed else EXIT_FAIL


def _solve(cfg: RunConfig):
    m = _model(cfg)
    ez = cfg.preferences
    try:
        rep = check_conditions(cfg.model, ez)
        if not rep.passed:
            log.warning("parameter conditions fail; solving anyway")
    except ValueError:
        log.warning("parameter conditions not applicable to these preferences; solving anyway")
    grid = make_grid(m, cfg.T, cfg.solver)
    surf = solve_value_pde(m, ez, grid, cfg.solver, check_bounds=False)
    return m, ez, grid, surf


def cmd_solve(cfg: RunConfig, args) -> int:
    m, ez, grid, surf = _solve(cfg)
    out = _out_dir(cfg, args)
    surf.to_csv(out / "value_surface.csv")
    extract_policy(m, ez, surf).to_csv(out / "policy_surface.csv")
    lower = apriori_lower_bound(m, ez, grid, cfg.solver)
    hmax = surf.info["h_max"]
    upper = (hmax - ez.delta * ez.theta) * (grid.T - surf.t)[:, None]
    up_v = float(np.max(surf.y - upper))
    lo_v = float(np.max(lower - surf.y))
    tol = cfg.solver.bound_tol
    lines = [
        f"h_max {_g17(hmax)}",
        f"upper_bound_constant {_g17(hmax - ez.delta * ez.theta)}",
        f"max_upper_violation {_g17(max(up_v, 0.0))}",
        f"max_lower_violation {_g17(max(lo_v, 0.0))}",
        f"tolerance {_g17(tol)}",
        f"y0_at_x0 {_g17(np.interp(cfg.x0, surf.x, surf.y[0]))}",
    ]
    (out / "bounds.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if ez.theta < 0 and (up_v > tol or lo_v > tol):
        print("a priori bounds violated beyond tolerance")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    m, ez, grid, surf = _solve(cfg)
    sc = cfg.simulation
    x0 = sc.x0 if sc.x0 is not None else cfg.x0
    plan = PathPlan(x0=x0, T=cfg.T, dt=sc.dt, n_paths=sc.paths, seed=sc.seed, chunk=sc.chunk)
    opt = OptimalPolicy(m, ez, surf)
    perts = {p.name: PerturbedPolicy(opt, p.pi_shift, p.ctilde_scale) for p in sc.perturbations}
    reports = []
    if "budget" in sc.checks:
        reports += martingale_budget_check(m, ez, surf, plan, sc.w0, perts)
    if "value" in sc.checks:
        reports.append(supermartingale_value_check(m, ez, surf, opt, plan, sc.w0, expect="martingale"))
        for name, pol in perts.items():
            r = supermartingale_value_check(m, ez, surf, pol, plan, sc.w0, expect="supermartingale")
            r.name += f"[{name}]"
            reports.append(r)
    out = _out_dir(cfg, args)
    for r in reports:
        print(r.verdict())
    (out / "sim_report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    (out / "sim_report.txt").write_text("\n".join(r.verdict() for r in reports) + "\n")
    if sc.dump_paths:
        b = simulate_state(m, x0, cfg.T, sc.dt, min(sc.paths, 1000), sc.seed)
        W = simulate_wealth(m, ez, opt, b, sc.w0).W
        with open(out / "paths.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "t", "x", "wealth"])
            for i in range(b.n_paths):
                for k, t in enumerate(b.t):
                    w.writerow([i, _g17(t), _g17(b.X[i, k]), _g17(W[i, k])])
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_horizon(cfg: RunConfig, args) -> int:
    m = _model(cfg)
    hc = cfg.horizon
    x0 = hc.x0 if hc.x0 is not None else cfg.x0
    out = _out_dir(cfg, args)
    rows = []
    for psi in hc.psi:
        for delta in hc.delta:
            try:
                ez = EZPreferences(cfg.preferences.gamma, psi, delta)
            except ValueError as exc:
                raise ConfigError(f"horizon: {exc}") from exc
            series = stationary_consumption_limit(m, ez, x0, hc.T_max, hc.dT, cfg.solver)
            for T, c in zip(series.horizons, series.ctilde0):
                rows.append((T, psi, delta, c))
            ph = series.plateau_horizon(0.02)
            print(
                f"psi={psi:g} delta={delta:g}: ctilde0(T_max)={series.ctilde0[-1]:.6g} "
                f"plateau(2%)={'none' if math.isinf(ph) else f'{ph:g}'} monotone={series.monotone()}"
            )
    with open(out / "horizon.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "psi", "delta", "ctilde0"])
        for r in rows:
            w.writerow([_g17(v) for v in r])
    return EXIT_OK


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "simulate": cmd_simulate, "horizon": cmd_horizon}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ezinvest", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="simulation seed (unsigned 64-bit)")
    p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    p.add_argument("--dt", type=float, help="simulation time step in years")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
