"""RR(10) skew term structure for the Heston limit, SS1 and (optionally) SSJ.

European or down-and-out (L(t) = L - slope*t) contexts; writes CSV to stdout.

    python3 scripts/skew_curves.py --kind down_and_out --slope 20 --jumps > skew.csv
"""
import argparse
import csv
import sys

from sslv.grid import GridSpec
from sslv.model import heston_limit_params, reference_jump_spec, reference_params
from sslv.pricing import Barriers, Contract, build_contexts, default_grid, rr10_skew_curve


def curve(params, jumps, Ts, barriers, n, dt):
    ext = dict(extra_s=(6, 6), extra_v=(0, 6), extra_r=(6, 6)) if jumps is not None else {}
    anchor = None
    if barriers is not None:
        anchor = Contract("down_and_out_call", Ts[-1], strike=params.S0, lower=barriers.lower,
                          lower_slope=barriers.lower_slope)
    g = default_grid(params, anchor, GridSpec(*n, **ext), Ts[-1])
    ctxs = dict(zip(Ts, build_contexts(params, jumps, g, Ts, dt, barriers)))
    return [s for _, s in rr10_skew_curve(Ts, ctxs.__getitem__)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--kind", choices=("european", "down_and_out"), default="european")
    ap.add_argument("--L", type=float, default=50.0)
    ap.add_argument("--slope", type=float, default=20.0)
    ap.add_argument("--maturities", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])
    ap.add_argument("--grid", type=int, nargs=3, default=(41, 31, 31))
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--jumps", action="store_true", help="add the SSJ column")
    args = ap.parse_args()

    Ts = sorted(args.maturities)
    bar = Barriers(args.L, None, args.slope) if args.kind == "down_and_out" else None
    cols = {"heston": curve(heston_limit_params(), None, Ts, bar, args.grid, args.dt),
            "ss1": curve(reference_params(), None, Ts, bar, args.grid, args.dt)}
    if args.jumps:
        cols["ssj"] = curve(reference_params(), reference_jump_spec(), Ts, bar, args.grid, args.dt)
    w = csv.writer(sys.stdout)
    w.writerow(["T"] + [f"rr10_{k}" for k in cols])
    for i, T in enumerate(Ts):
        w.writerow([T] + ["" if cols[k][i] is None else f"{cols[k][i]:.17g}" for k in cols])


if __name__ == "__main__":
    main()
