"""Flat-vol implied volatility of double-no-touch prices, SS1 against the Heston limit.

    python3 scripts/dnt_iv.py --L 50 --H 84.5 > dnt_iv.csv
"""
import argparse
import csv
import sys

from sslv.grid import GridSpec
from sslv.model import heston_limit_params, reference_params
from sslv.pricing import Contract, build_contexts, default_grid, dnt_implied_vol


def ivs(params, Ts, L, H, n, dt):
    c = Contract("double_no_touch", Ts[-1], lower=L, upper=H)
    g = default_grid(params, c, GridSpec(*n), Ts[-1])
    out = []
    for T, ctx in zip(Ts, build_contexts(params, None, g, Ts, dt, c.barriers)):
        price = ctx.discount * ctx.density.mass
        try:
            out.append((price, dnt_implied_vol(price, params.S0, L, H, T, params.r_d, params.r_f)))
        except ValueError:
            out.append((price, None))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--L", type=float, default=50.0)
    ap.add_argument("--H", type=float, default=84.5)
    ap.add_argument("--maturities", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5])
    ap.add_argument("--grid", type=int, nargs=3, default=(41, 31, 31))
    ap.add_argument("--dt", type=float, default=0.01)
    args = ap.parse_args()

    Ts = sorted(args.maturities)
    a = ivs(reference_params(), Ts, args.L, args.H, args.grid, args.dt)
    b = ivs(heston_limit_params(), Ts, args.L, args.H, args.grid, args.dt)
    w = csv.writer(sys.stdout)
    w.writerow(["T", "price_ss1", "iv_ss1", "price_heston", "iv_heston", "iv_difference"])
    fmt = lambda x: "" if x is None else f"{x:.17g}"
    for T, (p1, v1), (p2, v2) in zip(Ts, a, b):
        d = None if v1 is None or v2 is None else v1 - v2
        w.writerow([T, fmt(p1), fmt(v1), fmt(p2), fmt(v2), fmt(d)])


if __name__ == "__main__":
    main()
