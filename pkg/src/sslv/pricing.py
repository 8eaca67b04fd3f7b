"""Density evolution, contract pricing, implied volatilities and RR(10) skews.

Densities are node masses: a price is the discounted sum of mass times
payoff, and the mass absorbed at barriers is tracked separately.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

from .diffusion import SchemeConfig, StepOperators
from .grid import Grid3D, GridSpec, build_grid, locate_barrier, time_grid
from .jumps import CommonJumpConfig, JumpStepper
from .model import JumpSpec, ModelParams

KINDS = ("european_call", "european_put", "down_and_out_call", "down_and_out_put", "double_no_touch")


@dataclass(frozen=True)
class Contract:
    kind: str
    T: float
    strike: float | None = None
    lower: float | None = None
    upper: float | None = None
    lower_slope: float = 0.0  # lower barrier L(t) = lower - lower_slope * t

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown contract kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("maturity must be positive")
        if self.kind != "double_no_touch" and self.strike is None:
            raise ValueError(f"{self.kind} needs a strike")
        if self.kind.startswith("down_and_out") and self.lower is None:
            raise ValueError(f"{self.kind} needs a lower barrier")
        if self.kind == "double_no_touch" and (self.lower is None or self.upper is None):
            raise ValueError("double_no_touch needs both barriers")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise ValueError("need lower < upper")
        if self.lower is not None and self.lower_barrier(self.T) <= 0:
            raise ValueError("lower barrier must stay positive up to maturity")

    def lower_barrier(self, t: float) -> float | None:
        return None if self.lower is None else self.lower - self.lower_slope * t

    @property
    def barriers(self) -> "Barriers | None":
        if self.lower is None and self.upper is None:
            return None
        return Barriers(self.lower, self.upper, self.lower_slope)

    def payoff(self, S):
        S = np.asarray(S, dtype=float)
        if self.kind in ("european_call", "down_and_out_call"):
            return np.maximum(S - self.strike, 0.0)
        if self.kind in ("european_put", "down_and_out_put"):
            return np.maximum(self.strike - S, 0.0)
        return np.ones_like(S)


@dataclass(frozen=True)
class Barriers:
    lower: float | None = None
    upper: float | None = None
    lower_slope: float = 0.0

    def lower_at(self, t):
        return None if self.lower is None else self.lower - self.lower_slope * t


@dataclass
class DensityField:
    values: np.ndarray
    t: float
    grid: Grid3D
    absorbed: float = 0.0
    history: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def mass(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class PricingConfig:
    dt: float = 0.01
    scheme: SchemeConfig = SchemeConfig()
    common: CommonJumpConfig = CommonJumpConfig()
    grid: GridSpec = GridSpec()


def initial_density(grid: Grid3D, S0: float, v0: float, R0: float) -> np.ndarray:
    """Unit mass on the node nearest the initial state."""
    p = np.zeros(grid.shape)
    p[grid.nearest_node(S0, v0, R0)] = 1.0
    return p


def absorbing_nodes(axis, barriers: Barriers | None, t: float) -> np.ndarray | None:
    """Mask of spot nodes at or beyond the snapped barriers at time ``t``."""
    if barriers is None:
        return None
    x = axis.nodes
    mask = np.zeros(x.size, dtype=bool)
    L = barriers.lower_at(t)
    if L is not None and L >= x[0]:
        mask[: locate_barrier(axis, min(L, x[-1]), "lower") + 1] = True
    H = barriers.upper
    if H is not None and H <= x[-1]:
        mask[locate_barrier(axis, max(H, x[0]), "upper"):] = True
    return mask


def _absorb(p: np.ndarray, grid: Grid3D, barriers: Barriers | None, t: float) -> float:
    mask = absorbing_nodes(grid.s, barriers, t)
    if mask is None or not mask.any():
        return 0.0
    lost = float(p[mask].sum())
    p[mask] = 0.0
    return lost


def evolve_density(params: ModelParams, jumps: JumpSpec | None, grid: Grid3D, T: float, dt: float,
                   barriers: Barriers | None = None, scheme: SchemeConfig = SchemeConfig(),
                   common: CommonJumpConfig = CommonJumpConfig(), p0: np.ndarray | None = None,
                   snapshots=(), monitor: Callable | None = None) -> DensityField:
    """Evolve the density from the initial state to ``T``.

    Without jumps every step is a single diffusion step on the whole grid.
    With jumps a step is half a diffusion step on the diffusion box, one jump
    step on the full grid and another half diffusion step. Barrier nodes are
    emptied after every sub-step and are absorbing inside the diffusion
    solves, so mass that reaches them cannot diffuse back. ``snapshots`` lists times at which copies of
    the density are appended to ``history`` (they must be step times).
    ``monitor(before, after, absorbed, t)`` is called after every step.
    """
    p = initial_density(grid, params.S0, params.v0, params.R0) if p0 is None else np.array(p0, float)
    out = DensityField(p, 0.0, grid)
    out.absorbed = _absorb(p, grid, barriers, 0.0)
    times = time_grid(T, dt)
    with_jumps = jumps is not None and jumps.is_active()
    box = grid.box if with_jumps else (slice(None),) * 3
    dgrid = grid.diffusion_grid() if with_jumps else grid
    frozen = None if barriers is None else (lambda t: absorbing_nodes(dgrid.s, barriers, t))
    ops = StepOperators(params, dgrid, scheme, frozen=frozen)
    stepper = JumpStepper(jumps, grid, common) if with_jumps else None
    out.stats = {"mixed": ops.stats, "common": stepper.stats if stepper else []}
    snaps = sorted(snapshots)
    for t0, t1 in zip(times[:-1], times[1:]):
        h = t1 - t0
        before = p.copy()
        lost = 0.0
        if not with_jumps:
            p = ops.forward(p, t0, h)
            lost += _absorb(p, grid, barriers, t1)
        else:
            tm = t0 + 0.5 * h
            p[box] = ops.forward(p[box], t0, 0.5 * h)
            lost += _absorb(p, grid, barriers, tm)
            p = stepper.step(p, h)
            lost += _absorb(p, grid, barriers, tm)
            p[box] = ops.forward(p[box], tm, 0.5 * h)
            lost += _absorb(p, grid, barriers, t1)
        out.absorbed += lost
        if monitor is not None:
            monitor(before, p, lost, t1)
        for s in snaps:
            if abs(s - t1) < 1e-9:
                out.history.append((t1, p.copy(), out.absorbed))
    out.values = p
    out.t = float(times[-1])
    return out


def price_from_density(density, payoff, r_d: float, T: float, grid: Grid3D | None = None) -> float:
    """Discounted expectation of a payoff of ``S`` under node masses."""
    if isinstance(density, DensityField):
        grid = density.grid
        values = density.values
    else:
        values = np.asarray(density, dtype=float)
    if grid is None:
        raise ValueError("a grid is needed to price a bare array")
    S = grid.s.nodes
    pay = payoff(S) if callable(payoff) else np.asarray(payoff, dtype=float)
    marginal = values.reshape(S.size, -1).sum(axis=1)
    return float(math.exp(-r_d * T) * np.dot(marginal, pay))


def default_grid(params: ModelParams, contract: Contract | None, spec: GridSpec, T: float) -> Grid3D:
    anchors = []
    if contract is not None:
        if contract.lower is not None and contract.lower_slope == 0:
            anchors.append(contract.lower)
        if contract.upper is not None:
            anchors.append(contract.upper)
    return build_grid(params.S0, params.v0, params.R0, spec, T=T, xi_r=params.xi_r, s_anchors=anchors)


def price_contract(contract: Contract, params: ModelParams, jumps: JumpSpec | None = None,
                   grid: Grid3D | None = None, dt: float = 0.01, cfg: PricingConfig = PricingConfig(),
                   monitor=None) -> float:
    grid = grid if grid is not None else default_grid(params, contract, cfg.grid, contract.T)
    if contract.lower is not None and contract.lower_barrier(contract.T) <= grid.s.nodes[0]:
        raise ValueError("lower barrier outside the grid")
    if contract.upper is not None and contract.upper >= grid.s.nodes[-1]:
        raise ValueError("upper barrier outside the grid")
    dens = evolve_density(params, jumps, grid, contract.T, dt, contract.barriers, cfg.scheme, cfg.common,
                          monitor=monitor)
    if contract.kind == "double_no_touch":
        return math.exp(-params.r_d * contract.T) * dens.mass
    return price_from_density(dens, contract.payoff, params.r_d, contract.T)


# ---------------------------------------------------------------- Black tools
def black_price(forward, strike, T, vol, discount=1.0, call=True):
    if vol <= 0 or T <= 0:
        intrinsic = max(forward - strike, 0.0) if call else max(strike - forward, 0.0)
        return discount * intrinsic
    s = vol * math.sqrt(T)
    d1 = (math.log(forward / strike) + 0.5 * s * s) / s
    d2 = d1 - s
    if call:
        return discount * (forward * norm.cdf(d1) - strike * norm.cdf(d2))
    return discount * (strike * norm.cdf(-d2) - forward * norm.cdf(-d1))


def implied_vol(price, forward, strike, T, discount=1.0, call=True, tol=1e-10) -> float:
    """Black implied volatility; 0 at intrinsic, error outside the no-arbitrage bounds."""
    intrinsic = discount * (max(forward - strike, 0.0) if call else max(strike - forward, 0.0))
    upper = discount * (forward if call else strike)
    if price < intrinsic - 1e-12 * max(1.0, upper) or price >= upper:
        raise ValueError(f"price {price} outside the Black bounds [{intrinsic}, {upper})")
    if price <= intrinsic + 1e-14 * max(1.0, upper):
        return 0.0
    f = lambda s: black_price(forward, strike, T, s, discount, call) - price
    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e4:
            raise ValueError("implied volatility not bracketed")
    return brentq(f, 1e-12, hi, xtol=tol, rtol=1e-15, maxiter=500)


def black_spot_delta(S0, strike, T, vol, r_d, r_f, call=True):
    F = S0 * math.exp((r_d - r_f) * T)
    s = vol * math.sqrt(T)
    df_f = math.exp(-r_f * T)
    if s == 0:
        itm = F > strike if call else F < strike
        return (df_f if call else -df_f) * float(itm)
    d1 = (math.log(F / strike) + 0.5 * s * s) / s
    return df_f * norm.cdf(d1) if call else -df_f * norm.cdf(-d1)


def dnt_black_price(S0, lower, upper, T, vol, r_d, r_f, terms=None):
    """Double-no-touch paying one under a flat volatility (eigenfunction series).

    By default the series runs until the time decay of the last term is below
    ``e^-45``.
    """
    if not lower < S0 < upper:
        return 0.0
    nu = r_d - r_f - 0.5 * vol * vol
    Z = math.log(upper / lower)
    a = math.log(S0 / lower)
    k = nu / vol**2
    if terms is None:
        terms = int(min(1e6, math.ceil(Z / math.pi * math.sqrt(90.0 / (vol * vol * T))))) + 1
    n = np.arange(1, terms + 1)
    w = n * math.pi / Z
    term = (2 / Z) * np.sin(w * a) * w * (math.exp(-k * a) - (-1.0) ** n * math.exp(k * (Z - a))) / (k * k + w * w)
    decay = np.exp(-(0.5 * w * w * vol * vol + 0.5 * nu * nu / vol**2) * T)
    return float(math.exp(-r_d * T) * np.sum(term * decay))


def dnt_implied_vol(price, S0, lower, upper, T, r_d, r_f) -> float:
    """Flat volatility reproducing a double-no-touch price."""
    f = lambda s: dnt_black_price(S0, lower, upper, T, s, r_d, r_f) - price
    lo, hi = 0.02, 5.0
    if f(lo) * f(hi) > 0:
        raise ValueError("double-no-touch price outside the flat-volatility range")
    return brentq(f, lo, hi, xtol=1e-12)


# ---------------------------------------------------------------- skew
@dataclass(frozen=True)
class NoSolution:
    reason: str = "no strike attains the requested delta"

    def __bool__(self):
        return False


@dataclass
class PricingContext:
    """Model prices at one maturity for every strike, from an evolved density.

    With ``delta_method="black"`` deltas are Black spot deltas at the model's
    own implied volatility, also for barrier contracts, whose prices are
    inverted with the vanilla formula. With ``"model"`` the delta is the
    difference quotient of prices from densities started on the two spot
    nodes adjacent to ``S0`` (supplied in ``bumped``).
    """

    params: ModelParams
    T: float
    grid: Grid3D
    density: DensityField
    delta_method: str = "black"
    bumped: tuple | None = None

    def __post_init__(self):
        if self.delta_method not in ("black", "model"):
            raise ValueError("delta_method must be 'black' or 'model'")
        if self.delta_method == "model" and self.bumped is None:
            raise ValueError("model deltas need the bumped densities")

    @property
    def forward(self):
        return self.params.S0 * math.exp((self.params.r_d - self.params.r_f) * self.T)

    @property
    def discount(self):
        return math.exp(-self.params.r_d * self.T)

    @staticmethod
    def _payoff(K, call):
        return (lambda S: np.maximum(S - K, 0.0)) if call else (lambda S: np.maximum(K - S, 0.0))

    def price(self, K, call=True):
        return price_from_density(self.density, self._payoff(K, call), self.params.r_d, self.T)

    def implied_vol(self, K, call=True):
        return implied_vol(self.price(K, call), self.forward, K, self.T, self.discount, call)

    def delta(self, K, call=True):
        if self.delta_method == "model":
            (d_dn, s_dn), (d_up, s_up) = self.bumped
            pay = self._payoff(K, call)
            up = price_from_density(d_up, pay, self.params.r_d, self.T)
            dn = price_from_density(d_dn, pay, self.params.r_d, self.T)
            return (up - dn) / (s_up - s_dn)
        return black_spot_delta(self.params.S0, K, self.T, self.implied_vol(K, call),
                                self.params.r_d, self.params.r_f, call)


def _snapshots(d: DensityField, Ts, dt):
    by_t = {round(t, 9): DensityField(v, t, d.grid, a) for t, v, a in d.history}
    missing = [t for t in Ts if round(t, 9) not in by_t]
    if missing:
        raise ValueError(f"maturities {missing} are not multiples of dt={dt}")
    return [by_t[round(t, 9)] for t in Ts]


def build_contexts(params, jumps, grid, maturities, dt, barriers: Barriers | None = None,
                   scheme=SchemeConfig(), common=CommonJumpConfig(),
                   delta_method: str = "black") -> list[PricingContext]:
    """Pricing contexts at several maturities from one evolution (multiples of ``dt``).

    Model deltas cost two more evolutions, started one spot node either side of ``S0``.
    """
    Ts = sorted(maturities)
    run = lambda p0: evolve_density(params, jumps, grid, Ts[-1], dt, barriers, scheme, common,
                                    p0=p0, snapshots=Ts)
    main = _snapshots(run(None), Ts, dt)
    if delta_method != "model":
        return [PricingContext(params, t, grid, d, delta_method) for t, d in zip(Ts, main)]
    i, j, k = grid.nearest_node(params.S0, params.v0, params.R0)
    sides = []
    for ii in (i - 1, i + 1):
        p0 = np.zeros(grid.shape)
        p0[ii, j, k] = 1.0
        sides.append((_snapshots(run(p0), Ts, dt), grid.s.nodes[ii]))
    return [PricingContext(params, t, grid, main[n], "model",
                           tuple((snaps[n], S) for snaps, S in sides)) for n, t in enumerate(Ts)]


def build_context(params, jumps, grid, T, dt, barriers: Barriers | None = None,
                  scheme=SchemeConfig(), common=CommonJumpConfig(), delta_method: str = "black"):
    return build_contexts(params, jumps, grid, [T], dt, barriers, scheme, common, delta_method)[0]


def strike_at_delta(delta_target: float, side: str, ctx: PricingContext, n_scan: int = 200):
    """Strike whose spot delta equals ``delta_target`` (calls) or ``-delta_target`` (puts)."""
    if not 0 < delta_target < 1:
        raise ValueError("delta_target must lie in (0, 1)")
    call = side == "call"
    if side not in ("call", "put"):
        raise ValueError("side must be 'call' or 'put'")
    target = delta_target if call else -delta_target
    F = ctx.forward
    try:
        width = 4.0 * ctx.implied_vol(F, True) * math.sqrt(ctx.T)
    except ValueError:
        width = 1.0
    Ks = F * np.exp(np.linspace(-1.0, 1.0, n_scan) * max(width, 0.05))
    Ks = Ks[(Ks > ctx.grid.s.nodes[1]) & (Ks < ctx.grid.s.nodes[-2])]

    def g(K):
        try:
            return ctx.delta(K, call) - target
        except ValueError:
            return np.nan

    vals = np.array([g(K) for K in Ks])
    ok = np.isfinite(vals)
    idx = np.where(ok[:-1] & ok[1:] & (np.sign(vals[:-1]) != np.sign(vals[1:])))[0]
    if idx.size == 0:
        return NoSolution()
    # the delta is monotone in K away from barriers; take the bracket nearest the forward
    m = idx[np.argmin(np.abs(np.log(Ks[idx] / F)))]
    return brentq(g, Ks[m], Ks[m + 1], xtol=1e-10 * F)


def rr10_skew_curve(maturities, make_context: Callable[[float], PricingContext]):
    """Rows ``(T, skew)``: IV(10-delta call) - IV(10-delta put); ``None`` if unavailable."""
    Ts = list(maturities)
    if any(b <= a for a, b in zip(Ts[:-1], Ts[1:])):
        raise ValueError("maturities must increase")
    rows = []
    for T in Ts:
        ctx = make_context(T)
        kc = strike_at_delta(0.1, "call", ctx)
        kp = strike_at_delta(0.1, "put", ctx)
        if isinstance(kc, NoSolution) or isinstance(kp, NoSolution):
            rows.append((T, None))
            continue
        try:
            rows.append((T, ctx.implied_vol(kc, True) - ctx.implied_vol(kp, False)))
        except ValueError:
            rows.append((T, None))
    return rows
