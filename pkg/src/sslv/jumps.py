"""Discrete jump generators for Kou jumps and the transposed Strang jump step.

Jumps act additively in the jump coordinates ``log S``, ``log v`` and ``R``.
Generators come from integrating the Levy density against the piecewise
linear interpolant of the field, so they are exact on linear functions away
from the grid ends; jumps leaving the grid land on the boundary node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .banded import BandedLU, LineOperator
from .grid import Axis, Grid3D
from .model import JumpSpec, KouJumpParams
from .operators import generator_weights

COMPENSATORS = ("exponential", "linear")


def jump_coordinates(axis: Axis) -> tuple[np.ndarray, int]:
    """Jump coordinate of each node and the index of the first usable node.

    Spot and variance jumps are multiplicative, so those axes use the log of
    the node; a node at zero is excluded (it carries a zero row).
    """
    x = axis.nodes
    if axis.kind in ("spot", "variance"):
        first = int(np.searchsorted(x, 0.0, side="right"))
        z = np.full(x.size, -np.inf)
        z[first:] = np.log(x[first:])
        return z, first
    return x.copy(), 0


def _side_moments(k: KouJumpParams, A, B):
    """``int_A^B k(y) dy`` and ``int_A^B y k(y) dy`` for the normalized Kou
    density (intensity excluded), elementwise over intervals."""
    with np.errstate(invalid="ignore"):
        return _side_moments_raw(k, np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def _side_moments_raw(k: KouJumpParams, A, B):
    m = np.inf if k.y_max is None else k.y_max
    m0 = np.zeros(np.broadcast(A, B).shape)
    m1 = np.zeros_like(m0)
    # up-jumps on [0, m]
    a = np.clip(A, 0.0, m)
    b = np.clip(B, 0.0, m)
    t1 = k.theta1
    ea, eb = np.exp(-t1 * a), np.exp(-t1 * b)
    eb = np.where(np.isinf(b), 0.0, eb)
    bterm = np.where(np.isinf(b), 0.0, (b + 1 / t1) * eb)
    m0 += k.p * (ea - eb)
    m1 += k.p * ((a + 1 / t1) * ea - bterm)
    # down-jumps on [-m, 0)
    a = np.clip(A, -m, 0.0)
    b = np.clip(B, -m, 0.0)
    t2 = k.theta2
    ea, eb = np.exp(t2 * a), np.exp(t2 * b)
    ea = np.where(np.isinf(a), 0.0, ea)
    aterm = np.where(np.isinf(a), 0.0, (a - 1 / t2) * ea)
    m0 += (1 - k.p) * (eb - ea)
    m1 += (1 - k.p) * ((b - 1 / t2) * eb - aterm)
    return m0, m1


def compensator_mean(k: KouJumpParams, kind: str, scale: float = 1.0) -> float:
    """``int comp(scale*y) nu(dy)``: ``e^{sy} - 1`` or ``s*y``."""
    if kind == "exponential":
        return k.exp_compensator(scale)
    if kind == "linear":
        return scale * k.mean_jump()
    raise ValueError(f"compensator must be one of {COMPENSATORS}, got {kind!r}")


@dataclass
class JumpGenerator:
    """Dense generator on one axis (rows sum to zero, off-diagonals >= 0)."""

    matrix: np.ndarray
    axis_index: int
    kind: str

    def apply(self, f: np.ndarray) -> np.ndarray:
        return _along(self.matrix, f, self.axis_index)


def build_idiosyncratic_generator(k: KouJumpParams, axis: Axis, compensator_kind: str,
                                  axis_index: int = 0) -> JumpGenerator:
    if compensator_kind not in COMPENSATORS:
        raise ValueError(f"compensator must be one of {COMPENSATORS}, got {compensator_kind!r}")
    n = len(axis)
    J = np.zeros((n, n))
    if k.phi == 0:
        return JumpGenerator(J, axis_index, compensator_kind)
    X, first = jump_coordinates(axis)
    Xa = X[first:]
    na = Xa.size
    W = np.zeros((na, na))
    for i in range(na):
        ya, yb = Xa[:-1] - Xa[i], Xa[1:] - Xa[i]
        m0, m1 = _side_moments(k, ya, yb)
        L = yb - ya
        W[i, :-1] += (yb * m0 - m1) / L
        W[i, 1:] += (m1 - ya * m0) / L
        lo, _ = _side_moments(k, -np.inf, ya[0])
        hi, _ = _side_moments(k, yb[-1], np.inf)
        W[i, 0] += lo
        W[i, -1] += hi
    W *= k.phi
    np.fill_diagonal(W, W.diagonal() - W.sum(axis=1))
    mu = -compensator_mean(k, compensator_kind)
    lo, dg, up = generator_weights(Xa, np.full(na, mu), np.zeros(na))
    # central drift where it keeps the combined off-diagonals non-negative
    d1 = np.zeros((3, na))
    hm, hp = Xa[1:-1] - Xa[:-2], Xa[2:] - Xa[1:-1]
    hs = hm + hp
    d1[0, 1:-1], d1[1, 1:-1], d1[2, 1:-1] = -hp / (hm * hs), (hp - hm) / (hm * hp), hm / (hp * hs)
    i = np.arange(1, na - 1)
    c_lo = W[i, i - 1] + mu * d1[0, i]
    c_up = W[i, i + 1] + mu * d1[2, i]
    central = (c_lo >= 0) & (c_up >= 0)
    D = np.zeros((na, na))
    D[0, 1], D[0, 0] = up[0], dg[0]
    D[-1, -2], D[-1, -1] = lo[-1], dg[-1]
    D[i, i - 1] = np.where(central, mu * d1[0, i], lo[i])
    D[i, i] = np.where(central, mu * d1[1, i], dg[i])
    D[i, i + 1] = np.where(central, mu * d1[2, i], up[i])
    J[first:, first:] = W + D
    return JumpGenerator(J, axis_index, compensator_kind)


def _along(A, f, axis):
    """Apply a matrix (dense or sparse) along one axis of a 3D field."""
    g = np.moveaxis(f, axis, 0)
    shp = g.shape
    out = A @ g.reshape(shp[0], -1)
    return np.moveaxis(np.asarray(out).reshape(shp), 0, axis)


def interpolation_shift(axis: Axis, delta: float) -> sp.csr_matrix:
    """``(T f)_i = f(x_i + delta)`` by linear interpolation in jump coordinates,
    clamped to the end nodes; rows are non-negative and sum to one."""
    X, first = jump_coordinates(axis)
    n = len(axis)
    Xa = X[first:]
    tgt = np.clip(Xa + delta, Xa[0], Xa[-1])
    j = np.clip(np.searchsorted(Xa, tgt, side="right") - 1, 0, Xa.size - 2)
    w = (tgt - Xa[j]) / (Xa[j + 1] - Xa[j])
    rows = np.concatenate([np.arange(first, n)] * 2 + [np.arange(first)])
    cols = np.concatenate([j + first, j + 1 + first, np.arange(first)])
    vals = np.concatenate([1 - w, w, np.ones(first)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _kou_quadrature(k: KouJumpParams, n: int = 32):
    """Nodes and weights integrating against the Kou Levy measure
    (Gauss-Legendre in ``u = exp(-theta |y|)`` on each side)."""
    g, gw = np.polynomial.legendre.leggauss(n)
    ys, ws = [], []
    m = np.inf if k.y_max is None else k.y_max
    for prob, rate, sign in ((k.p, k.theta1, 1.0), (1 - k.p, k.theta2, -1.0)):
        u_lo = 0.0 if np.isinf(m) else np.exp(-rate * m)
        u = u_lo + (1 - u_lo) * (g + 1) / 2
        ys.append(sign * (-np.log(u) / rate))
        ws.append(k.phi * prob * gw * (1 - u_lo) / 2)
    return np.concatenate(ys), np.concatenate(ws)


@dataclass(frozen=True)
class CommonJumpConfig:
    """Damped fixed-point solve of the common-factor step.

    Each sweep adds ``s/(1+s)`` times the preconditioned residual, the
    preconditioner being the implicit compensator drifts.
    """

    s: float = 10000.0
    tol: float = 1e-10
    max_sweeps: int = 200
    quadrature_nodes: int = 32

    def __post_init__(self):
        if not self.s > 0 or not self.tol > 0 or self.max_sweeps < 1:
            raise ValueError("need s > 0, tol > 0 and max_sweeps >= 1")


class CommonJumpGenerator:
    """``J = sum_q w_q [T_s T_v T_r - I] + compensator drifts`` for the common factor."""

    def __init__(self, jumps: JumpSpec, grid: Grid3D, cfg: CommonJumpConfig = CommonJumpConfig()):
        self.grid = grid
        self.cfg = cfg
        z = jumps.common
        b = jumps.loadings
        self.active = z.phi > 0 and any(x != 0 for x in b)
        self.shifts = []
        self.intensity = 0.0
        self.drifts = []
        if not self.active:
            return
        ys, ws = _kou_quadrature(z, cfg.quadrature_nodes)
        self.intensity = float(ws.sum())
        for y, w in zip(ys, ws):
            Ts = [interpolation_shift(ax, bi * y) if bi != 0 else None for ax, bi in zip(grid.axes, b)]
            self.shifts.append((w, Ts))
        kinds = ("exponential", "exponential", "linear")
        for ax, (axis, bi, kind) in enumerate(zip(grid.axes, b, kinds)):
            if bi == 0:
                continue
            # compensator from the same quadrature, so linear moments are consistent
            if kind == "exponential":
                mean = float(np.sum(ws * np.expm1(bi * ys)))
            else:
                mean = float(np.sum(ws * bi * ys))
            X, first = jump_coordinates(axis)
            Xa = X[first:]
            lo, dg, up = generator_weights(Xa, np.full(Xa.size, -mean), np.zeros(Xa.size))
            n = len(axis)
            full = [np.zeros(n) for _ in range(3)]
            for f, part in zip(full, (lo, dg, up)):
                f[first:] = part
            bshape = [1, 1, 1]
            bshape[ax] = n
            bands = np.stack([np.broadcast_to(f.reshape(bshape), grid.shape) for f in full])
            self.drifts.append(LineOperator(ax, (-1, 0, 1), bands.copy()))

    def apply(self, f, transpose=False):
        """Action of the generator (or its transpose) on a field."""
        if not self.active:
            return np.zeros_like(f)
        out = -self.intensity * f
        for w, Ts in self.shifts:
            g = f
            for ax, T in enumerate(Ts):
                if T is not None:
                    g = _along(T.T if transpose else T, g, ax)
            out = out + w * g
        for d in self.drifts:
            out = out + (d.T.matvec(f) if transpose else d.matvec(f))
        return out

    def dense(self) -> np.ndarray:
        n = self.grid.size
        E = np.eye(n)
        return np.stack([self.apply(E[k].reshape(self.grid.shape)).ravel() for k in range(n)], axis=1)

    def solve_implicit(self, y, c, transpose=True, stats=None):
        """Solve ``(I - c J^T) z = y`` by damped preconditioned sweeps.

        Every sweep preserves the total mass of ``z``."""
        if not self.active:
            return y.copy()
        pre = [BandedLU((d.T if transpose else d).shifted_identity(1.0, -c)) for d in self.drifts]
        omega = self.cfg.s / (1.0 + self.cfg.s)
        z = y.copy()
        scale = max(np.abs(y).max(), 1e-300)
        res = np.inf
        for k in range(1, self.cfg.max_sweeps + 1):
            r = y - (z - c * self.apply(z, transpose))
            for lu in pre:
                r = lu.solve(r)
            z = z + omega * r
            res = np.abs(r).max() / scale
            if res < self.cfg.tol:
                if stats is not None:
                    stats.append(k)
                return z
        from .diffusion import ConvergenceError
        raise ConvergenceError(f"common jump step residual {res:.3e} after {k} sweeps", residual=res,
                               iterations=k)


class JumpStepper:
    """Transposed Strang-split jump exponential on a jump grid."""

    def __init__(self, jumps: JumpSpec, grid: Grid3D, cfg: CommonJumpConfig = CommonJumpConfig()):
        self.jumps = jumps
        self.grid = grid
        self.idio = []
        for ax, (k, kind) in enumerate(zip((jumps.idio_s, jumps.idio_v, jumps.idio_r),
                                           ("exponential", "exponential", "linear"))):
            g = build_idiosyncratic_generator(k, grid.axes[ax], kind, ax)
            self.idio.append(g if k.phi > 0 else None)
        self.common = CommonJumpGenerator(jumps, grid, cfg)
        self._lu = {}
        self.stats: list[int] = []

    def _solve_idio(self, ax, y, c):
        key = (ax, c)
        if key not in self._lu:
            J = self.idio[ax].matrix
            self._lu[key] = la.lu_factor(np.eye(J.shape[0]) - c * J.T)
        g = np.moveaxis(y, ax, 0)
        shp = g.shape
        out = la.lu_solve(self._lu[key], g.reshape(shp[0], -1))
        return np.moveaxis(out.reshape(shp), 0, ax)

    def step(self, p, dt):
        """``e^{dt/2 J_s^T} e^{dt/2 J_v^T} e^{dt/2 J_r^T} e^{dt J_c^T}`` then the
        mirrored half steps, each exponential replaced by its implicit solve."""
        x = p
        order = [ax for ax in range(3) if self.idio[ax] is not None]
        for ax in order:
            x = self._solve_idio(ax, x, 0.5 * dt)
        x = self.common.solve_implicit(x, dt, transpose=True, stats=self.stats)
        for ax in reversed(order):
            x = self._solve_idio(ax, x, 0.5 * dt)
        return x


def apply_jump_exponential_transposed(p, generators: JumpStepper, dt: float, common_cfg=None):
    """One transposed jump step of a density on the jump grid."""
    if common_cfg is not None and common_cfg != generators.common.cfg:
        generators.common.cfg = common_cfg
    return generators.step(p, dt)
