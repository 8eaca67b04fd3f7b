"""Command-line entry point: ``run``, ``compare`` and ``validate``.

Exit codes: 0 ok, 1 configuration error, 2 scheme-invariant violation,
3 oracle mismatch beyond tolerance. ``SSLV_WORKERS`` caps the number of
contracts priced in parallel.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np
import yaml

from .diffusion import PicardConfig, SchemeConfig
from .grid import GridSpec
from .jumps import CommonJumpConfig
from .model import JumpSpec, KouJumpParams, ModelParams
from .pricing import (Barriers, Contract, PricingConfig, build_contexts, default_grid, dnt_implied_vol,
                      evolve_density, price_from_density, rr10_skew_curve)
from .validation import MCConfig, StepMonitor, heston_benchmark_price, mc_price

OK, CONFIG_ERROR, INVARIANT_ERROR, ORACLE_ERROR = 0, 1, 2, 3
FMT = "{:.17g}"

MODEL_KEYS = {"T", "r_d", "r_f", "L", "H", "kappa_v", "xi_v", "theta_v", "kappa_r", "xi_r", "theta_r",
              "rho_vr", "S0", "v0", "rho_xy0", "a", "c"}
JUMP_ROWS = {"L_s": "idio_s", "L_v": "idio_v", "L_r": "idio_r", "Z": "common"}
JUMP_KEYS = {"phi", "p", "theta1", "theta2", "b", "y_max"}
SCHEME_KEYS = {"dt", "theta", "beta", "tol", "max_iters", "method", "explicit", "mixed_stencil", "adi_s",
               "adi_tol", "adi_max_sweeps", "quadrature_nodes"}
CONTRACT_KEYS = {"kind", "K", "T", "L", "H", "L_slope"}
ORACLE_KEYS = {"heston", "mc_paths", "mc_substeps", "mc_seed", "tol", "mc_sigmas"}
CHECK_KEYS = {"mass_tol", "positivity_tol"}
TOP_KEYS = {"model", "jumps", "grid", "scheme", "contracts", "oracle", "skew", "dnt", "slices", "checks",
            "output"}


class ConfigError(ValueError):
    def __init__(self, where: str, msg: str):
        super().__init__(f"{where}: {msg}")
        self.where = where


@dataclass
class ExperimentConfig:
    params: ModelParams
    jumps: JumpSpec | None
    grid: GridSpec
    pricing: PricingConfig
    contracts: list
    L: float | None = None
    H: float | None = None
    T: float = 0.5
    oracle: dict = field(default_factory=dict)
    skew: dict | None = None
    dnt: dict | None = None
    slices: dict | None = None
    checks: dict = field(default_factory=lambda: {"mass_tol": 1e-8, "positivity_tol": 1e-10})
    output: str = "out"


def _block(raw, name, allowed, required=False):
    blk = raw.get(name)
    if blk is None:
        if required:
            raise ConfigError(name, "missing block")
        return {}
    if not isinstance(blk, dict):
        raise ConfigError(name, "must be a mapping")
    unknown = set(blk) - allowed
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    return blk


def _num(blk, where, key, default=None, kind=float):
    val = blk.get(key, default)
    if val is None:
        if default is None and key in blk:
            return None
        raise ConfigError(f"{where}.{key}", "required")
    try:
        out = kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}", f"expected a {kind.__name__}, got {val!r}") from None
    if kind is float and not math.isfinite(out):
        raise ConfigError(f"{where}.{key}", "must be finite")
    return out


def _build(where, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(where, str(e)) from None


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown block")
    m = _block(raw, "model", MODEL_KEYS, required=True)
    g = lambda k, d=None: _num(m, "model", k, d)
    if "rho_xy0" not in m:
        raise ConfigError("model.rho_xy0", "required")
    rho0 = g("rho_xy0")
    if not -1 < rho0 < 1:
        raise ConfigError("model.rho_xy0", "must lie strictly inside (-1, 1)")
    params = _build("model", ModelParams, r_d=g("r_d"), r_f=g("r_f"), kappa_v=g("kappa_v"), theta_v=g("theta_v"),
                    xi_v=g("xi_v"), a=g("a", 0.5), c=g("c", 1.0), kappa_r=g("kappa_r"), theta_r=g("theta_r"),
                    xi_r=g("xi_r"), rho_vr=g("rho_vr"), S0=g("S0"), v0=g("v0"), rho0=rho0)
    T = g("T")
    if not T > 0:
        raise ConfigError("model.T", "must be positive")
    L = _num(m, "model", "L", None) if "L" in m else None
    H = _num(m, "model", "H", None) if "H" in m else None

    jumps = None
    jb = _block(raw, "jumps", set(JUMP_ROWS))
    if jb:
        rows, loads = {}, {}
        for row, name in JUMP_ROWS.items():
            r = _block(jb, row, JUMP_KEYS)
            where = f"jumps.{row}"
            if not r:
                rows[name] = KouJumpParams(0.0, 0.5, 2.0, 2.0)
                continue
            for key in ("theta1", "phi", "p", "theta2"):
                _num(r, where, key)
            ymax = _num(r, where, "y_max", None) if r.get("y_max") is not None else None
            if r["theta1"] <= 1:
                raise ConfigError(f"{where}.theta1", "must exceed 1")
            rows[name] = _build(where, KouJumpParams, float(r["phi"]), float(r["p"]), float(r["theta1"]),
                                float(r["theta2"]), ymax)
            if row != "Z":
                loads["b_" + row[-1]] = _num(r, where, "b", 0.0)
        jumps = _build("jumps", JumpSpec, rows["idio_s"], rows["idio_v"], rows["idio_r"], rows["common"],
                       loads.get("b_s", 0.0), loads.get("b_v", 0.0), loads.get("b_r", 0.0))

    gb = _block(raw, "grid", set(GridSpec.__dataclass_fields__))
    gkw = {}
    for k, v in gb.items():
        if k.startswith("n_"):
            gkw[k] = _num(gb, "grid", k, kind=int)
        elif k.startswith("extra_"):
            if not (isinstance(v, (list, tuple)) and len(v) == 2):
                raise ConfigError(f"grid.{k}", "expected a pair of integers")
            gkw[k] = (int(v[0]), int(v[1]))
        elif v is None:
            gkw[k] = None
        else:
            gkw[k] = _num(gb, "grid", k)
    for k in ("n_s", "n_v", "n_r"):
        if gkw.get(k, 5) < 5:
            raise ConfigError(f"grid.{k}", "needs at least 5 nodes")
    grid = GridSpec(**gkw)
    if jumps is not None and jumps.is_active() and grid.extra_s == (0, 0):
        defaults = dict(extra_s=(6, 6), extra_v=(0, 6), extra_r=(6, 6))
        grid = dc_replace(grid, **{k: v for k, v in defaults.items() if k not in gkw})

    sb = _block(raw, "scheme", SCHEME_KEYS)
    dt = _num(sb, "scheme", "dt", 0.01)
    if not dt > 0:
        raise ConfigError("scheme.dt", "must be positive")
    beta = sb.get("beta", 10.0)
    method = sb.get("method", "gmres")
    if method not in ("gmres", "picard", "direct"):
        raise ConfigError("scheme.method", f"unknown method {method!r}")
    mixed = PicardConfig(beta=None if beta is None else float(beta), tol=_num(sb, "scheme", "tol", 1e-8),
                         max_iters=_num(sb, "scheme", "max_iters", 10, int), method=method)
    scheme = _build("scheme", SchemeConfig, theta=_num(sb, "scheme", "theta", 0.3),
                    explicit=bool(sb.get("explicit", False)), mixed=mixed,
                    mixed_stencil=sb.get("mixed_stencil", "one_sided"))
    common = CommonJumpConfig(s=_num(sb, "scheme", "adi_s", 1e4), tol=_num(sb, "scheme", "adi_tol", 1e-10),
                              max_sweeps=_num(sb, "scheme", "adi_max_sweeps", 200, int),
                              quadrature_nodes=_num(sb, "scheme", "quadrature_nodes", 32, int))
    pricing = PricingConfig(dt=dt, scheme=scheme, common=common, grid=grid)

    contracts = []
    for n, c in enumerate(raw.get("contracts") or []):
        where = f"contracts[{n}]"
        if not isinstance(c, dict):
            raise ConfigError(where, "must be a mapping")
        bad = set(c) - CONTRACT_KEYS
        if bad:
            raise ConfigError(f"{where}.{sorted(bad)[0]}", "unknown key")
        kind = c.get("kind")
        K = c.get("K")
        if K == "ATM":
            K = params.S0
        barrier_lo = c.get("L", L if kind in ("down_and_out_call", "down_and_out_put", "double_no_touch") else None)
        barrier_hi = c.get("H", H if kind == "double_no_touch" else None)
        contracts.append(_build(where, Contract, kind=kind, T=float(c.get("T", T)),
                                strike=None if K is None else float(K),
                                lower=None if barrier_lo is None else float(barrier_lo),
                                upper=None if barrier_hi is None else float(barrier_hi),
                                lower_slope=float(c.get("L_slope", 0.0))))

    oracle = _block(raw, "oracle", ORACLE_KEYS)
    cb = _block(raw, "checks", CHECK_KEYS)
    checks = {"mass_tol": _num(cb, "checks", "mass_tol", 1e-8),
              "positivity_tol": _num(cb, "checks", "positivity_tol", 1e-10)}

    skew = _block(raw, "skew", {"maturities", "kind", "L_slope", "compare_heston"}) or None
    if skew:
        _maturities(skew, "skew", dt)
        if skew.get("kind", "european") not in ("european", "down_and_out"):
            raise ConfigError("skew.kind", "expected european or down_and_out")
        if skew.get("kind") == "down_and_out" and L is None:
            raise ConfigError("model.L", "required for down_and_out skew")
    dnt = _block(raw, "dnt", {"maturities", "compare_heston"}) or None
    if dnt:
        _maturities(dnt, "dnt", dt)
        if L is None or H is None:
            raise ConfigError("model.L", "double-no-touch needs L and H")
    slices = _block(raw, "slices", {"T", "planes"}) or None
    if slices:
        for pl in slices.get("planes", ["Sv"]):
            if pl not in ("Sv", "SR", "vR"):
                raise ConfigError("slices.planes", f"unknown plane {pl!r}")
    out = raw.get("output", "out")
    return ExperimentConfig(params, jumps, grid, pricing, contracts, L, H, T, oracle, skew, dnt, slices,
                            checks, str(out))


def _maturities(blk, where, dt):
    Ts = blk.get("maturities")
    if not Ts or not all(isinstance(t, (int, float)) and t > 0 for t in Ts):
        raise ConfigError(f"{where}.maturities", "expected a list of positive numbers")
    if any(b <= a for a, b in zip(Ts[:-1], Ts[1:])):
        raise ConfigError(f"{where}.maturities", "must increase")
    if any(abs(t / dt - round(t / dt)) > 1e-9 for t in Ts):
        raise ConfigError(f"{where}.maturities", "must be multiples of scheme.dt")


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(str(path), f"cannot read: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"invalid YAML: {e}") from None
    return parse_config(raw)


# ---------------------------------------------------------------- running
def heston_limit(params: ModelParams) -> ModelParams:
    return params.with_(kappa_r=0.0, xi_r=0.0, rho_vr=0.0)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if x is None else FMT.format(x) if isinstance(x, (float, np.floating)) else x
                        for x in r])


def _price_one(args):
    contract, params, jumps, cfg = args
    grid = default_grid(params, contract, cfg.grid, contract.T)
    mon = StepMonitor()
    clock = [time.perf_counter()]
    steps = []

    def monitor(before, after, absorbed, t):
        now = time.perf_counter()
        mon(before, after, absorbed, t)
        rep = mon.reports[-1]
        steps.append((t, rep.mass_drift, absorbed, rep.min_value, rep.max_value, now - clock[0]))
        clock[0] = now

    dens = evolve_density(params, jumps, grid, contract.T, cfg.dt, contract.barriers, cfg.scheme, cfg.common,
                          monitor=monitor)
    if contract.kind == "double_no_touch":
        price = math.exp(-params.r_d * contract.T) * dens.mass
    else:
        price = price_from_density(dens, contract.payoff, params.r_d, contract.T)
    mixed = dens.stats.get("mixed", [])
    common = dens.stats.get("common", [])
    return price, steps, (len(steps), float(np.mean(mixed)) if mixed else 0.0, max(mixed, default=0),
                          int(sum(common)), dens.mass + dens.absorbed)


def _oracles(contract, cfg: ExperimentConfig):
    out = None
    o = cfg.oracle
    if o.get("heston") and contract.kind in ("european_call", "european_put") and \
            (cfg.jumps is None or not cfg.jumps.is_active()):
        try:
            out = heston_benchmark_price(cfg.params, contract.strike, contract.T, contract.kind == "european_call")
        except ValueError:
            out = None
    if out is None and o.get("mc_paths"):
        mc = MCConfig(paths=int(o["mc_paths"]), dt=cfg.pricing.dt, substeps=int(o.get("mc_substeps", 10)),
                      seed=int(o.get("mc_seed", 0)))
        price, se = mc_price(contract, cfg.params, cfg.jumps, mc)
        return price, se
    return out, None


def _skew_rows(cfg: ExperimentConfig, params, jumps, Ts, barriers):
    c = None
    if barriers is not None:
        c = Contract("down_and_out_call", Ts[-1], strike=params.S0, lower=barriers.lower,
                     lower_slope=barriers.lower_slope)
    grid = default_grid(params, c, cfg.grid, Ts[-1])
    ctxs = build_contexts(params, jumps, grid, Ts, cfg.pricing.dt, barriers, cfg.pricing.scheme,
                          cfg.pricing.common)
    table = dict(zip(Ts, ctxs))
    return rr10_skew_curve(Ts, table.__getitem__)


def _dnt_rows(cfg: ExperimentConfig, params, jumps, Ts):
    c = Contract("double_no_touch", Ts[-1], lower=cfg.L, upper=cfg.H)
    grid = default_grid(params, c, cfg.grid, Ts[-1])
    ctxs = build_contexts(params, jumps, grid, Ts, cfg.pricing.dt, c.barriers, cfg.pricing.scheme,
                          cfg.pricing.common)
    rows = []
    for T, ctx in zip(Ts, ctxs):
        price = math.exp(-params.r_d * T) * ctx.density.mass
        try:
            iv = dnt_implied_vol(price, params.S0, cfg.L, cfg.H, T, params.r_d, params.r_f)
        except ValueError:
            iv = None
        rows.append((T, price, iv))
    return rows


def run(config_path, out_dir=None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_ERROR
    out = Path(out_dir or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    status = OK

    workers = max(1, int(os.environ.get("SSLV_WORKERS", "1")))
    jobs = [(c, cfg.params, cfg.jumps, cfg.pricing) for c in cfg.contracts]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_price_one, jobs))
    else:
        results = [_price_one(j) for j in jobs]

    price_rows, step_rows, summary_rows, time_rows = [], [], [], []
    tol = float(cfg.oracle.get("tol", 1e-3))
    sigmas = float(cfg.oracle.get("mc_sigmas", 3.0))
    for n, (c, (price, steps, summary)) in enumerate(zip(cfg.contracts, results)):
        oracle, se = _oracles(c, cfg)
        diff = None if oracle is None or oracle == 0 else price / oracle - 1
        if oracle is not None:
            bad = abs(price - oracle) > sigmas * se if se is not None else abs(diff or 0.0) > tol
            if bad:
                status = max(status, ORACLE_ERROR)
        price_rows.append((c.kind, c.strike, c.T, c.lower, c.upper, c.lower_slope, price, oracle, se, diff))
        for k, row in enumerate(steps):
            step_rows.append((n, k + 1) + row[:-1])
            time_rows.append((n, k + 1, row[-1]))
        summary_rows.append((n, c.kind) + summary)
        mass_bad = abs(summary[-1] - 1.0) > cfg.checks["mass_tol"]
        pos_bad = any(r[3] < -cfg.checks["positivity_tol"] * max(r[4], 0.0) for r in steps)
        if mass_bad or pos_bad:
            status = max(status, INVARIANT_ERROR)
    _write_csv(out / "prices.csv", ["kind", "K", "T", "L", "H", "L_slope", "price", "oracle", "oracle_se",
                                    "rel_diff"], price_rows)
    _write_csv(out / "report.csv", ["contract", "step", "t", "mass_drift", "absorbed", "min_density",
                                    "max_density"], step_rows)
    # wall time lives apart so that every other artifact is reproducible bit for bit
    _write_csv(out / "timing.csv", ["contract", "step", "seconds"], time_rows)
    _write_csv(out / "report_summary.csv", ["contract", "kind", "steps", "mean_mixed_iterations",
                                            "max_mixed_iterations", "common_jump_sweeps", "total_mass"],
               summary_rows)

    if cfg.skew:
        Ts = [float(t) for t in cfg.skew["maturities"]]
        barriers = None
        if cfg.skew.get("kind") == "down_and_out":
            barriers = Barriers(cfg.L, None, float(cfg.skew.get("L_slope", 0.0)))
        model = _skew_rows(cfg, cfg.params, cfg.jumps, Ts, barriers)
        ref = _skew_rows(cfg, heston_limit(cfg.params), None, Ts, barriers) \
            if cfg.skew.get("compare_heston", True) else [(T, None) for T in Ts]
        rows = [(T, a, b, None if a is None or b is None else a - b) for (T, a), (_, b) in zip(model, ref)]
        _write_csv(out / "skew.csv", ["T", "rr10_model", "rr10_heston_limit", "difference"], rows)

    if cfg.dnt:
        Ts = [float(t) for t in cfg.dnt["maturities"]]
        model = _dnt_rows(cfg, cfg.params, cfg.jumps, Ts)
        ref = _dnt_rows(cfg, heston_limit(cfg.params), None, Ts) if cfg.dnt.get("compare_heston", True) else None
        rows = []
        for k, (T, price, iv) in enumerate(model):
            r_iv = ref[k][2] if ref else None
            rows.append((T, price, iv, r_iv, None if iv is None or r_iv is None else iv - r_iv))
        _write_csv(out / "dnt.csv", ["T", "price", "iv_model", "iv_heston_limit", "difference"], rows)

    if cfg.slices:
        T = float(cfg.slices.get("T", cfg.T))
        grid = default_grid(cfg.params, None, cfg.grid, T)
        dens = evolve_density(cfg.params, cfg.jumps, grid, T, cfg.pricing.dt, None, cfg.pricing.scheme,
                              cfg.pricing.common)
        i, j, k = grid.nearest_node(cfg.params.S0, cfg.params.v0, cfg.params.R0)
        names = {"Sv": ("S", "v", lambda p: p[:, :, k]), "SR": ("S", "R", lambda p: p[:, j, :]),
                 "vR": ("v", "R", lambda p: p[i, :, :])}
        nodes = {"S": grid.s.nodes, "v": grid.v.nodes, "R": grid.r.nodes}
        for pl in cfg.slices.get("planes", ["Sv"]):
            a, b, take = names[pl]
            sl = take(dens.values)
            rows = [(x, y, sl[p, q]) for p, x in enumerate(nodes[a]) for q, y in enumerate(nodes[b])]
            _write_csv(out / f"density_{pl}.csv", [a, b, "density"], rows)
    return status


def _read(path: Path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _f(x):
    return None if x == "" else float(x)


def compare_runs(dir_a, dir_b, out_dir) -> int:
    a, b, out = Path(dir_a), Path(dir_b), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = {"skew.csv": ("rr10_model", "skew_diff.csv"), "dnt.csv": ("iv_model", "dnt_iv_diff.csv"),
              "prices.csv": ("price", "prices_diff.csv")}
    found = False
    for name, (col, target) in tables.items():
        if not (a / name).exists() or not (b / name).exists():
            continue
        found = True
        ha, ra = _read(a / name)
        hb, rb = _read(b / name)
        key = [h for h in ("kind", "K", "T", "L", "H", "L_slope") if h in ha]
        ka = [tuple(r[ha.index(h)] for h in key) for r in ra]
        kb = [tuple(r[hb.index(h)] for h in key) for r in rb]
        if ka != kb:
            print(f"mismatched rows in {name}", file=sys.stderr)
            return CONFIG_ERROR
        rows = []
        for k, x, y in zip(ka, ra, rb):
            va, vb = _f(x[ha.index(col)]), _f(y[hb.index(col)])
            rows.append(k + (va, vb, None if va is None or vb is None else va - vb))
        _write_csv(out / target, key + [f"{col}_a", f"{col}_b", "difference"], rows)
    if not found:
        print("no comparable tables found", file=sys.stderr)
        return CONFIG_ERROR
    return OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sslv", description="Forward-PIDE pricing experiments.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="price the configured contracts and write CSV artifacts")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    c = sub.add_parser("compare", help="difference tables between two run directories")
    c.add_argument("dir_a")
    c.add_argument("dir_b")
    c.add_argument("--out", default="compare")
    v = sub.add_parser("validate", help="check a config without computing")
    v.add_argument("config")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return run(args.config, args.out)
    if args.cmd == "compare":
        return compare_runs(args.dir_a, args.dir_b, args.out)
    try:
        load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_ERROR
    print("ok")
    return OK


if __name__ == "__main__":
    sys.exit(main())
