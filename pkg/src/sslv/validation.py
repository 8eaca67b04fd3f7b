"""Independent checks: a Heston characteristic-function pricer, a Monte Carlo
simulator of the full jump-diffusion, and per-step density monitors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .model import JumpSpec, KouJumpParams, ModelParams
from .pricing import Contract


# ---------------------------------------------------------------- Heston oracle
def _heston_cf(u, T, x0, v0, kappa, theta, xi, rho, rd, rf):
    # log-price characteristic function, branch-stable form
    iu = 1j * u
    beta = kappa - rho * xi * iu
    d = np.sqrt(beta**2 + xi**2 * (iu + u * u))
    g = (beta - d) / (beta + d)
    e = np.exp(-d * T)
    C = (rd - rf) * iu * T + kappa * theta / xi**2 * ((beta - d) * T - 2 * np.log((1 - g * e) / (1 - g)))
    D = (beta - d) / xi**2 * (1 - e) / (1 - g * e)
    return np.exp(C + D * v0 + iu * x0)


def _is_unit_local_vol(params: ModelParams) -> bool:
    S = np.array([1e-3, 1.0, params.S0, 10 * params.S0])
    return all(np.allclose(params.local_vol(S, t), 1.0) for t in (0.0, 0.5, 1.0))


def heston_benchmark_price(params: ModelParams, strike: float, T: float, call: bool = True) -> float:
    """Semi-analytic European price when the model reduces to Heston."""
    if params.kappa_r != 0 or params.xi_r != 0 or params.rho_vr != 0:
        raise ValueError("the correlation driver must be frozen (kappa_r = xi_r = rho_vr = 0)")
    if params.a != 0.5 or params.c != 1 or not _is_unit_local_vol(params):
        raise ValueError("Heston needs a = 0.5, c = 1 and unit local volatility")
    if params.is_time_dependent():
        raise ValueError("time-dependent coefficients are not supported")
    if params.xi_v <= 0:
        raise ValueError("vol-of-vol must be positive")
    args = (T, math.log(params.S0), params.v0, params.kappa_v_at(0.0), params.theta_v_at(0.0),
            params.xi_v, params.rho0, params.r_d, params.r_f)
    F = params.S0 * math.exp((params.r_d - params.r_f) * T)
    k = math.log(strike)

    def f1(u):
        return (np.exp(-1j * u * k) * _heston_cf(u - 1j, *args) / (1j * u * F)).real

    def f2(u):
        return (np.exp(-1j * u * k) * _heston_cf(u, *args) / (1j * u)).real

    P1 = 0.5 + quad(f1, 0, np.inf, limit=1000, epsabs=1e-13, epsrel=1e-12)[0] / math.pi
    P2 = 0.5 + quad(f2, 0, np.inf, limit=1000, epsabs=1e-13, epsrel=1e-12)[0] / math.pi
    df = math.exp(-params.r_d * T)
    c = df * (F * P1 - strike * P2)
    return c if call else c - df * (F - strike)


# ---------------------------------------------------------------- Monte Carlo
@dataclass(frozen=True)
class MCConfig:
    paths: int = 100_000
    dt: float = 0.01
    substeps: int = 10
    seed: int = 0
    antithetic: bool = False
    batch: int = 50_000

    def __post_init__(self):
        if self.paths < 1 or self.substeps < 1 or self.batch < 1:
            raise ValueError("paths, substeps and batch must be positive")
        if self.antithetic and self.batch % 2:
            raise ValueError("antithetic sampling needs an even batch size")


def sample_kou(k: KouJumpParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` jump sizes from the normalized (possibly truncated) Kou measure."""
    Y = np.inf if k.y_max is None else k.y_max
    up_mass = k.p * -math.expm1(-k.theta1 * Y)
    dn_mass = (1 - k.p) * -math.expm1(-k.theta2 * Y)
    up = rng.random(n) < up_mass / (up_mass + dn_mass)
    theta = np.where(up, k.theta1, k.theta2)
    u = rng.random(n)
    size = -np.log1p(-u * -np.expm1(-theta * Y)) / theta
    return np.where(up, size, -size)


def _compound(k: KouJumpParams, n: int, h: float, rng, scale: float = 1.0):
    """Sums of Kou jumps over an interval ``h`` for ``n`` paths."""
    out = np.zeros(n)
    if k.phi <= 0 or scale == 0:
        return out
    counts = rng.poisson(k.intensity * h, n)
    for m in range(1, counts.max(initial=0) + 1):
        idx = np.nonzero(counts >= m)[0]
        out[idx] += sample_kou(k, idx.size, rng)
    return scale * out


def _batch(contract: Contract, params: ModelParams, jumps: JumpSpec | None, cfg: MCConfig, n: int, rng):
    T = contract.T
    n_steps = max(1, int(round(T / cfg.dt))) * cfg.substeps
    h = T / n_steps
    sq = math.sqrt(h)
    half = n // 2 if cfg.antithetic else n
    x = np.full(n, math.log(params.S0))
    v = np.full(n, params.v0)
    R = np.full(n, params.R0)
    alive = np.ones(n, dtype=bool)
    active = jumps is not None and jumps.is_active()
    if active:
        comp_s = jumps.idio_s.exp_compensator() + jumps.common.exp_compensator(jumps.b_s)
        comp_v = jumps.idio_v.exp_compensator() + jumps.common.exp_compensator(jumps.b_v)
        comp_r = jumps.idio_r.mean_jump() + jumps.b_r * jumps.common.mean_jump()
    else:
        comp_s = comp_v = comp_r = 0.0
    rvr = params.rho_vr
    c3 = math.sqrt(max(0.0, 1 - rvr * rvr))
    t = 0.0
    for _ in range(n_steps):
        Z = rng.standard_normal((3, half))
        if cfg.antithetic:
            Z = np.concatenate([Z, -Z], axis=1)
        rho = np.tanh(R)
        s1 = np.sqrt(np.maximum(0.0, 1 - rho * rho))
        Ws = Z[0]
        Wv = rho * Z[0] + s1 * Z[1]
        Wr = rho * rvr * Z[0] + rvr * s1 * Z[1] + c3 * Z[2]
        vp = np.maximum(v, 0.0)
        S = np.exp(x)
        vol = params.local_vol(S, t) * S ** (params.c - 1) * np.sqrt(vp)
        x = x + (params.r_d - params.r_f - comp_s - 0.5 * vol * vol) * h + vol * sq * Ws
        v = v + (params.kappa_v_at(t) * (params.theta_v_at(t) - vp) - comp_v * vp) * h \
            + params.xi_v * vp**params.a * sq * Wv
        R = R + (params.kappa_r_at(t) * (params.theta_r_at(t) - R) - comp_r) * h + params.xi_r * sq * Wr
        if active:
            zc = _compound(jumps.common, n, h, rng)
            x = x + _compound(jumps.idio_s, n, h, rng) + jumps.b_s * zc
            v = v + vp * np.expm1(_compound(jumps.idio_v, n, h, rng) + jumps.b_v * zc)
            R = R + _compound(jumps.idio_r, n, h, rng) + jumps.b_r * zc
        t += h
        if contract.lower is not None:
            alive &= np.exp(x) > contract.lower_barrier(t)
        if contract.upper is not None:
            alive &= np.exp(x) < contract.upper
    payoff = contract.payoff(np.exp(x)) * alive
    return math.exp(-params.r_d * T) * payoff


def mc_price(contract: Contract, params: ModelParams, jumps: JumpSpec | None = None,
             cfg: MCConfig = MCConfig()) -> tuple[float, float]:
    """Discounted Monte Carlo price and its standard error.

    Paths are simulated in fixed-size batches, each with its own stream spawned
    from ``cfg.seed``, so results do not depend on how batches are scheduled.
    """
    n_batches = -(-cfg.paths // cfg.batch)
    streams = np.random.SeedSequence(cfg.seed).spawn(n_batches)
    values = []
    left = cfg.paths
    for ss in streams:
        n = min(cfg.batch, left)
        if cfg.antithetic and n % 2:
            n += 1
        values.append(_batch(contract, params, jumps, cfg, n, np.random.default_rng(ss)))
        left -= n
    vals = np.concatenate(values)
    if cfg.antithetic:
        # pair up antithetic draws batch by batch before estimating the error
        pairs = np.concatenate([0.5 * (b[: b.size // 2] + b[b.size // 2:]) for b in values])
        return float(vals.mean()), float(pairs.std(ddof=1) / math.sqrt(pairs.size)) if pairs.size > 1 else 0.0
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return float(vals.mean()), se


# ---------------------------------------------------------------- monitors
@dataclass(frozen=True)
class MonitorReport:
    mass_drift: float
    min_value: float
    max_value: float
    mass_ok: bool
    positive: bool
    absorbed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.mass_ok and self.positive


def monitor_step(before, after, absorbed: float = 0.0, mass_tol: float = 1e-10,
                 positivity_tol: float = 1e-10) -> MonitorReport:
    """Mass change across a step, and whether it is explained by absorption."""
    before = np.asarray(before)
    after = np.asarray(after)
    drift = float(after.sum() - before.sum())
    lo, hi = float(after.min()), float(after.max())
    return MonitorReport(drift, lo, hi, abs(drift + absorbed) <= mass_tol,
                         lo >= -positivity_tol * max(hi, 0.0), absorbed)


@dataclass
class StepMonitor:
    """Callable collecting a report per step; pass it as ``monitor`` to evolution."""

    mass_tol: float = 1e-10
    positivity_tol: float = 1e-10

    def __post_init__(self):
        self.reports: list[MonitorReport] = []

    def __call__(self, before, after, absorbed, t):
        self.reports.append(monitor_step(before, after, absorbed, self.mass_tol, self.positivity_tol))

    @property
    def worst_min_ratio(self) -> float:
        return min((r.min_value / r.max_value for r in self.reports if r.max_value > 0), default=0.0)

    @property
    def worst_mass_error(self) -> float:
        return max((abs(r.mass_drift + r.absorbed) for r in self.reports), default=0.0)


def richardson_ratio(coarse: float, medium: float, fine: float) -> float:
    """``(coarse - medium) / (medium - fine)``; about 4 for a second-order method."""
    return (coarse - medium) / (medium - fine)
