"""Time-0 optimal policy in the Heston model over the variance state, T = 10 years.

Left panel: gamma = 5 with several psi. Right panel: psi = 1.5 with several gamma.
Writes a long-format CSV for external plotting.
"""

import argparse

from _common import summarise, time0_policy, write_sweep

from ezinvest import EZPreferences, HestonParams, SolverConfig, make_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/policy_heston.csv")
    ap.add_argument("--n-x", type=int, default=400)
    ap.add_argument("--delta", type=float, default=0.08)
    args = ap.parse_args()
    m = make_model(HestonParams())
    cfg = SolverConfig(n_x=args.n_x)
    rows = []
    for psi in (0.5, 1.5, 3.0):
        rows.append(("left", 5.0, psi, args.delta, *time0_policy(m, EZPreferences(5.0, psi, args.delta), 10.0, cfg)))
    for g in (2.0, 5.0, 10.0):
        rows.append(("right", g, 1.5, args.delta, *time0_policy(m, EZPreferences(g, 1.5, args.delta), 10.0, cfg)))
    summarise(rows, 0.04)
    print("wrote", write_sweep(args.out, rows))


if __name__ == "__main__":
    main()
