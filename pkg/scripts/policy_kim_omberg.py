"""Time-0 optimal policy in the Kim-Omberg model over the premium state, T = 12 months.

Same layout as policy_heston.py; parameters are in monthly units.
"""

import argparse

from _common import summarise, time0_policy, write_sweep

from ezinvest import EZPreferences, KimOmbergParams, SolverConfig, make_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/policy_kim_omberg.csv")
    ap.add_argument("--n-x", type=int, default=400)
    ap.add_argument("--delta", type=float, default=0.0052)
    args = ap.parse_args()
    m = make_model(KimOmbergParams())
    cfg = SolverConfig(n_x=args.n_x, steps_per_unit=50)
    rows = []
    for psi in (0.5, 1.5, 3.0):
        rows.append(("left", 5.0, psi, args.delta, *time0_policy(m, EZPreferences(5.0, psi, args.delta), 12.0, cfg)))
    for g in (2.0, 5.0, 10.0):
        rows.append(("right", g, 1.5, args.delta, *time0_policy(m, EZPreferences(g, 1.5, args.delta), 12.0, cfg)))
    summarise(rows, 0.0)
    print("wrote", write_sweep(args.out, rows))


if __name__ == "__main__":
    main()
