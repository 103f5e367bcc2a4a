"""Helpers shared by the policy scripts."""

import csv
from pathlib import Path

import numpy as np

from ezinvest import SolverConfig, make_grid, solve_value_pde
from ezinvest.policy import extract_policy
from ezinvest.solver import _g17


def time0_policy(m, ez, T, cfg=SolverConfig()):
    """(x, pi*(0, x), ctilde*(0, x)) on the solver grid."""
    grid = make_grid(m, T, cfg)
    pol = extract_policy(m, ez, solve_value_pde(m, ez, grid, cfg, stride=grid.n_t))
    return pol.x, pol.pi_star[0], pol.ctilde_star[0]


def write_sweep(path, rows):
    """rows: iterable of (panel, gamma, psi, delta, x, pi, ctilde) with array x, pi, ctilde."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["panel", "gamma", "psi", "delta", "x", "pi_star", "ctilde_star"])
        for panel, g, psi, d, x, pi, c in rows:
            for xi, pii, ci in zip(x, pi, c):
                w.writerow([panel, _g17(g), _g17(psi), _g17(d), _g17(xi), _g17(pii), _g17(ci)])
    return path


def summarise(rows, at):
    for panel, g, psi, d, x, pi, c in rows:
        print(
            f"{panel:>6} gamma={g:<5g} psi={psi:<5g} pi*(0,{at:g})={np.interp(at, x, pi):.6g} "
            f"ctilde*(0,{at:g})={np.interp(at, x, c):.6g}"
        )
