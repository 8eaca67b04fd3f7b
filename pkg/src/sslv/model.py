"""Model parameters, correlation algebra and Kou jump moments.

State variables are the spot ``S``, the instantaneous variance ``v`` and the
unbounded correlation driver ``R`` with ``rho_t = tanh(R)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np

Coefficient = Union[float, Callable[[float], float]]

PSD_EPS = 1e-12


def _at(value: Coefficient, t: float) -> float:
    return float(value(t)) if callable(value) else float(value)


def _unit_local_vol(S, t):
    return np.ones_like(np.asarray(S, dtype=float))


@dataclass(frozen=True)
class ModelParams:
    r_d: float
    r_f: float
    kappa_v: Coefficient
    theta_v: Coefficient
    xi_v: float
    a: float
    c: float
    kappa_r: Coefficient
    theta_r: Coefficient
    xi_r: float
    rho_vr: float
    S0: float
    v0: float
    rho0: float
    local_vol: Callable = field(default=_unit_local_vol, compare=False)

    def __post_init__(self):
        if not self.S0 > 0:
            raise ValueError(f"S0 must be positive, got {self.S0}")
        if not self.v0 > 0:
            raise ValueError(f"v0 must be positive, got {self.v0}")
        if not abs(self.rho0) < 1:
            raise ValueError(f"rho0 must lie in (-1, 1), got {self.rho0}")
        if not abs(self.rho_vr) <= 1:
            raise ValueError(f"rho_vr must lie in [-1, 1], got {self.rho_vr}")
        if not 0 <= self.a < 2:
            raise ValueError(f"a must lie in [0, 2), got {self.a}")
        if not 0 <= self.c < 2:
            raise ValueError(f"c must lie in [0, 2), got {self.c}")
        if self.xi_v < 0 or self.xi_r < 0:
            raise ValueError("vol-of-vol parameters must be non-negative")

    @property
    def R0(self) -> float:
        return inverse_corr_map(self.rho0)

    def kappa_v_at(self, t: float) -> float:
        return _at(self.kappa_v, t)

    def theta_v_at(self, t: float) -> float:
        return _at(self.theta_v, t)

    def kappa_r_at(self, t: float) -> float:
        return _at(self.kappa_r, t)

    def theta_r_at(self, t: float) -> float:
        return _at(self.theta_r, t)

    def is_time_dependent(self) -> bool:
        return any(callable(x) for x in (self.kappa_v, self.theta_v, self.kappa_r, self.theta_r))

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    # volatilities of the diffusion parts, as used by the mixed-derivative coefficients
    def sigma_s(self, S, v, t: float = 0.0):
        S = np.asarray(S, dtype=float)
        return self.local_vol(S, t) * S**self.c * np.sqrt(np.maximum(v, 0.0))

    def sigma_v(self, v):
        return self.xi_v * np.maximum(np.asarray(v, dtype=float), 0.0) ** self.a

    def sigma_r(self):
        return self.xi_r


def reference_params(**overrides) -> ModelParams:
    """Stochastic-skew configuration (SS1) used throughout the experiments."""
    base = dict(r_d=0.02, r_f=0.01, kappa_v=2.0, theta_v=0.1, xi_v=0.3, a=0.5, c=1.0,
                kappa_r=0.3, theta_r=-0.2, xi_r=5.0, rho_vr=0.4, S0=65.0, v0=0.5, rho0=-0.7)
    base.update(overrides)
    return ModelParams(**base)


def heston_limit_params(**overrides) -> ModelParams:
    """Reference values with the correlation driver frozen at R0 (Heston benchmark)."""
    return reference_params(kappa_r=0.0, xi_r=0.0, rho_vr=0.0, **overrides)


def ss2_params(**overrides) -> ModelParams:
    """No mean reversion in the correlation driver."""
    return reference_params(kappa_r=3.0, theta_r=0.0, xi_r=5.0, rho_vr=0.4, **overrides)


@dataclass(frozen=True)
class KouJumpParams:
    """Double-exponential Levy measure, optionally restricted to ``|y| <= y_max``."""

    phi: float
    p: float
    theta1: float
    theta2: float
    y_max: float | None = None

    def __post_init__(self):
        if self.phi < 0:
            raise ValueError(f"phi must be non-negative, got {self.phi}")
        if not 0 < self.p < 1:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if not self.theta1 > 1:
            raise ValueError(f"theta1 must exceed 1, got {self.theta1}")
        if not self.theta2 > 0:
            raise ValueError(f"theta2 must be positive, got {self.theta2}")
        if self.y_max is not None and not self.y_max > 0:
            raise ValueError(f"y_max must be positive, got {self.y_max}")

    def density(self, y):
        y = np.asarray(y, dtype=float)
        up = self.p * self.theta1 * np.exp(-self.theta1 * np.abs(y))
        dn = (1 - self.p) * self.theta2 * np.exp(-self.theta2 * np.abs(y))
        out = self.phi * np.where(y >= 0, up, dn)
        if self.y_max is not None:
            out = np.where(np.abs(y) <= self.y_max, out, 0.0)
        return out

    def _side(self, rate: float, u: float, k: int) -> float:
        # int_0^m y^k rate e^{-(rate-u) y} dy, m = y_max (inf when untruncated)
        lam = rate - u
        m = self.y_max
        if m is None:
            if lam <= 0:
                return math.inf
            return rate * math.factorial(k) / lam ** (k + 1)
        if abs(lam) < 1e-14:
            return rate * m ** (k + 1) / (k + 1)
        em = math.exp(-lam * m)
        if k == 0:
            return rate * (1 - em) / lam
        if k == 1:
            return rate * (1 - em * (1 + lam * m)) / lam**2
        if k == 2:
            return rate * (2 - em * (lam**2 * m**2 + 2 * lam * m + 2)) / lam**3
        raise ValueError(k)

    def moment(self, k: int, u: float = 0.0) -> float:
        """``int y^k e^{u y} nu(dy)``."""
        up = self.p * self._side(self.theta1, u, k)
        dn = (1 - self.p) * self._side(self.theta2, -u, k) * (-1) ** k
        return self.phi * (up + dn)

    @property
    def intensity(self) -> float:
        return self.moment(0)

    def mean_jump(self) -> float:
        return self.moment(1)

    def exp_compensator(self, scale: float = 1.0) -> float:
        """``int (e^{scale*y} - 1) nu(dy)``; infinite if the exponential moment diverges."""
        return self.moment(0, scale) - self.moment(0)

    def has_exp_moment(self, scale: float) -> bool:
        return math.isfinite(self.moment(0, scale))

    def scaled(self, b: float) -> "ScaledKou":
        return ScaledKou(self, b)


@dataclass(frozen=True)
class ScaledKou:
    """Image of a Kou measure under ``y -> b*y`` (the common-factor loading)."""

    base: KouJumpParams
    b: float

    def moment(self, k: int, u: float = 0.0) -> float:
        return self.b**k * self.base.moment(k, u * self.b)


@dataclass(frozen=True)
class JumpSpec:
    idio_s: KouJumpParams
    idio_v: KouJumpParams
    idio_r: KouJumpParams
    common: KouJumpParams
    b_s: float = 0.0
    b_v: float = 0.0
    b_r: float = 0.0

    def __post_init__(self):
        for name, b in (("b_s", self.b_s), ("b_v", self.b_v)):
            if self.common.phi > 0 and b != 0 and not self.common.has_exp_moment(b):
                raise ValueError(
                    f"{name}={b}: the common-factor exponential moment E[exp({b} Z)] diverges; "
                    "set common.y_max to truncate the Levy measure")

    @classmethod
    def none(cls) -> "JumpSpec":
        z = KouJumpParams(0.0, 0.5, 2.0, 2.0)
        return cls(z, z, z, z)

    @property
    def loadings(self) -> tuple[float, float, float]:
        return (self.b_s, self.b_v, self.b_r)

    def is_active(self) -> bool:
        common = self.common.phi > 0 and any(b != 0 for b in self.loadings)
        return common or any(k.phi > 0 for k in (self.idio_s, self.idio_v, self.idio_r))


def reference_jump_spec(common_y_max: float | None = 0.5) -> JumpSpec:
    """Jump parameters of the SSJ setting.

    The loading ``b_s = 3`` equals the common up-jump rate ``theta1 = 3``, so the
    spot forward is infinite unless the common measure is truncated.
    """
    return JumpSpec(
        idio_s=KouJumpParams(0.3, 0.3, 3.0, 4.0),
        idio_v=KouJumpParams(0.3, 0.4, 2.0, 3.0),
        idio_r=KouJumpParams(0.3, 0.6, 1.5, 2.0),
        common=KouJumpParams(0.3, 0.3, 3.0, 3.5, y_max=common_y_max),
        b_s=3.0, b_v=2.0, b_r=5.0)


def corr_map(R):
    return np.tanh(R)


def inverse_corr_map(rho):
    return np.arctanh(rho)


def check_correlation_psd(rho_t: float, rho_sr: float, rho_vr: float) -> bool:
    for name, val in (("rho_t", rho_t), ("rho_sr", rho_sr), ("rho_vr", rho_vr)):
        if not -1.0 <= val <= 1.0:
            raise ValueError(f"{name}={val} outside [-1, 1]")
    det = 1 - rho_t**2 - rho_sr**2 - rho_vr**2 + 2 * rho_t * rho_vr * rho_sr
    return bool(det >= -PSD_EPS)


def kou_levy_variance(k: KouJumpParams, exact: bool = False) -> float:
    """Jump variance per unit time.

    The default is the tabulated closed form ``phi*(p/theta1^2 + (1-p)/theta2^2)``;
    ``exact=True`` returns the second moment of the (possibly truncated) measure,
    which is twice that for the untruncated Kou law.
    """
    if exact:
        return k.moment(2)
    return k.phi * (k.p / k.theta1**2 + (1 - k.p) / k.theta2**2)


def jump_pairwise_corr(b_i: float, b_j: float, var_z: float, var_i: float, var_j: float) -> float:
    if var_i <= 0 or var_j <= 0:
        raise ZeroDivisionError("jump variances must be positive")
    return b_i * b_j * var_z / (math.sqrt(var_i) * math.sqrt(var_j))


def total_correlations(state, params: ModelParams, jumps: JumpSpec | None = None, t: float = 0.0,
                       loading_power: int = 2, scale_jumps_by_state: bool = True):
    """Instantaneous (rho_sv, rho_vr, rho_sr) of the combined diffusion + jump drivers.

    ``loading_power=1, scale_jumps_by_state=False`` evaluates the formula exactly
    as tabulated; the defaults use ``Var(Y) + b^2 Var(Z)`` and the state factors
    ``S`` and ``v`` carried by the multiplicative jumps, which keeps every output
    inside [-1, 1].
    """
    S, v, R = state
    jumps = jumps or JumpSpec.none()
    sig_s = float(params.sigma_s(S, v, t))
    sig_v = float(params.sigma_v(v))
    sig_r = float(params.sigma_r())
    rho_t = float(np.tanh(R))
    var_z = kou_levy_variance(jumps.common)
    b = dict(s=jumps.b_s, v=jumps.b_v, r=jumps.b_r)
    var_y = dict(s=kou_levy_variance(jumps.idio_s), v=kou_levy_variance(jumps.idio_v),
                 r=kou_levy_variance(jumps.idio_r))
    # multiplicative jumps in S and v carry their state level in the variance;
    # the covariance numerator only carries it when scale_jumps_by_state is set
    level = dict(s=S, v=v, r=1.0)
    scale = level if scale_jumps_by_state else dict(s=1.0, v=1.0, r=1.0)
    var_l = {k: var_y[k] + b[k] ** loading_power * var_z for k in b}
    tot2 = {
        "s": sig_s**2 + level["s"] ** 2 * var_l["s"],
        "v": sig_v**2 + level["v"] ** 2 * var_l["v"],
        "r": sig_r**2 + var_l["r"],
    }
    if not all(x > 0 and math.isfinite(x) for x in tot2.values()):
        raise ZeroDivisionError(f"degenerate total variance {tot2}")
    tot = {k: math.sqrt(x) for k, x in tot2.items()}

    def cov(i, j, diff):
        return diff + scale[i] * scale[j] * b[i] * b[j] * var_z

    rho_sv = cov("s", "v", rho_t * sig_s * sig_v) / (tot["s"] * tot["v"])
    rho_vr = cov("v", "r", params.rho_vr * sig_v * sig_r) / (tot["v"] * tot["r"])
    rho_sr = cov("s", "r", rho_t * params.rho_vr * sig_s * sig_r) / (tot["s"] * tot["r"])
    return rho_sv, rho_vr, rho_sr
