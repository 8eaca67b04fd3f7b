"""Finite-difference operators for the diffusion part of the model.

``discretize_F`` builds the one-dimensional generators F1, F2, F3 on
non-uniform axes; ``build_mixed_factors`` builds the factorized implicit
operators for the three mixed-derivative pairs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .banded import BandedLU, LineOperator
from .grid import Axis, Grid3D
from .model import ModelParams

AXIS = {"S": 0, "v": 1, "R": 2}
PAIRS = {"Sv": (0, 1), "SR": (0, 2), "vR": (1, 2)}


# ---------------------------------------------------------------- stencils
def _three_point(x: np.ndarray):
    """Central first- and second-derivative weights at interior nodes."""
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    hs = hm + hp
    d1 = np.stack([-hp / (hm * hs), (hp - hm) / (hm * hp), hm / (hp * hs)])
    d2 = np.stack([2 / (hm * hs), -2 / (hm * hp), 2 / (hp * hs)])
    return d1, d2, hm, hp


def one_sided_weights(x: np.ndarray, orientation: str) -> np.ndarray:
    """Weights ``w[k, i]`` of ``f(x[i + k])`` (k = -2..2 stored at k + 2) for a
    one-sided first derivative exact on quadratics.

    Nodes without room for three points use the two-point stencil, and the
    node with no neighbour on the required side gets a zero row.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 3:
        raise ValueError("one-sided stencils need at least 3 nodes")
    w = np.zeros((5, n))
    if orientation == "backward":
        h1 = x[2:] - x[1:-1]
        h2 = x[1:-1] - x[:-2]
        i = np.arange(2, n)
        w[2, i] = (2 * h1 + h2) / (h1 * (h1 + h2))
        w[1, i] = -(h1 + h2) / (h1 * h2)
        w[0, i] = h1 / (h2 * (h1 + h2))
        w[2, 1] = 1 / (x[1] - x[0])
        w[1, 1] = -w[2, 1]
    elif orientation == "forward":
        h1 = x[1:-1] - x[:-2]
        h2 = x[2:] - x[1:-1]
        i = np.arange(0, n - 2)
        w[2, i] = -(2 * h1 + h2) / (h1 * (h1 + h2))
        w[3, i] = (h1 + h2) / (h1 * h2)
        w[4, i] = -h1 / (h2 * (h1 + h2))
        w[2, n - 2] = -1 / (x[-1] - x[-2])
        w[3, n - 2] = -w[2, n - 2]
    else:
        raise ValueError(f"orientation must be 'backward' or 'forward', got {orientation!r}")
    return w


def one_sided_A2(direction, orientation: str, axis) -> np.ndarray:
    """Dense one-sided second-order first-derivative matrix along one axis."""
    x = axis.nodes if isinstance(axis, Axis) else np.asarray(axis, dtype=float)
    w = one_sided_weights(x, orientation)
    n = x.size
    A = np.zeros((n, n))
    for k, o in enumerate(range(-2, 3)):
        i = np.arange(max(0, -o), min(n, n - o))
        A[i, i + o] = w[k, i]
    return A


def generator_weights(x: np.ndarray, drift: np.ndarray, diff: np.ndarray,
                      lower_open: np.ndarray | bool = True, upper_open: np.ndarray | bool = True):
    """Tridiagonal generator for ``drift*d/dx + diff*d2/dx2`` along the last axis.

    ``drift`` and ``diff`` broadcast to ``(..., n)``. Central differences are
    used where they keep both off-diagonals non-negative, first-order upwind
    otherwise. Boundary rows keep only an inward-pointing drift, one-sided;
    if the drift points outward (or the boundary is closed) the row is zero.
    Returns (lower, diag, upper), each ``(..., n)``.
    """
    d1, d2, hm, hp = _three_point(x)
    mu = drift[..., 1:-1]
    D = diff[..., 1:-1]
    lo = D * d2[0] + mu * d1[0]
    up = D * d2[2] + mu * d1[2]
    bad = (lo < 0) | (up < 0)
    lo_up = D * d2[0] + np.maximum(-mu, 0) / hm
    up_up = D * d2[2] + np.maximum(mu, 0) / hp
    lo = np.where(bad, lo_up, lo)
    up = np.where(bad, up_up, up)
    shape = np.broadcast_shapes(drift.shape, diff.shape)
    lower = np.zeros(shape)
    upper = np.zeros(shape)
    lower[..., 1:-1] = lo
    upper[..., 1:-1] = up
    mu0 = np.broadcast_to(drift, shape)[..., 0]
    mun = np.broadcast_to(drift, shape)[..., -1]
    upper[..., 0] = np.where(lower_open & (mu0 > 0), mu0, 0.0) / (x[1] - x[0])
    lower[..., -1] = np.where(upper_open & (mun < 0), -mun, 0.0) / (x[-1] - x[-2])
    diag = -(lower + upper)
    return lower, diag, upper


def feller_ok(params: ModelParams, t: float = 0.0) -> bool:
    """Accessibility test for v = 0: with it the PDE row is kept at v = 0."""
    return 2 * params.kappa_v_at(t) * params.theta_v_at(t) >= params.xi_v**2


def drift_diffusion(direction: str, params: ModelParams, grid: Grid3D, t: float):
    """Drift and half-variance coefficient fields (broadcastable to the grid)."""
    S = grid.s.nodes[:, None, None]
    v = grid.v.nodes[None, :, None]
    R = grid.r.nodes[None, None, :]
    if direction == "S":
        drift = (params.r_d - params.r_f) * S + 0 * v
        sig = params.local_vol(S, t) * S**params.c
        diff = 0.5 * sig**2 * np.maximum(v, 0.0)
    elif direction == "v":
        drift = params.kappa_v_at(t) * (params.theta_v_at(t) - v) + 0 * S
        diff = 0.5 * params.xi_v**2 * np.maximum(v, 0.0) ** (2 * params.a) + 0 * S
    elif direction == "R":
        drift = params.kappa_r_at(t) * (params.theta_r_at(t) - R)
        diff = 0.5 * params.xi_r**2 + 0 * R
    else:
        raise ValueError(f"direction must be S, v or R, got {direction!r}")
    return drift, diff


def discretize_F(direction: str, params: ModelParams, grid: Grid3D, t: float = 0.0,
                 discount: bool = False) -> LineOperator:
    """One-dimensional generator ``F_i`` at time ``t`` on every grid line.

    With ``discount`` each operator carries a third of ``-r_d``.
    """
    ax = AXIS[direction]
    drift, diff = drift_diffusion(direction, params, grid, t)
    shape = grid.shape
    drift = np.broadcast_to(drift, shape)
    diff = np.broadcast_to(diff, shape)
    x = grid.axes[ax].nodes
    lower_open = True
    if direction == "v" and grid.v.nodes[0] == 0.0:
        lower_open = feller_ok(params, t)
    lo, dg, up = generator_weights(x, np.moveaxis(drift, ax, -1), np.moveaxis(diff, ax, -1),
                                   lower_open=lower_open)
    bands = np.stack([np.moveaxis(b, -1, ax) for b in (lo, dg, up)])
    op = LineOperator(ax, (-1, 0, 1), bands)
    if discount:
        op.bands[1] -= params.r_d / 3.0
    return op


# ---------------------------------------------------------------- predicates
def _dense(B):
    return B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)


def is_generator_matrix(B, eps: float = 1e-10) -> bool:
    B = _dense(B)
    scale = max(1.0, float(np.abs(B).max(initial=0.0)))
    off = B - np.diag(np.diag(B))
    return bool(off.min(initial=0.0) >= -eps * scale and np.abs(B.sum(axis=1)).max(initial=0.0) <= eps * scale)


def is_M_matrix(M, eps: float = 1e-10) -> bool:
    """Z-sign pattern and positive diagonal, with weak diagonal dominance by
    rows or by columns (or, failing both, a non-negative inverse)."""
    M = _dense(M)
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    d = np.diag(M)
    off = M - np.diag(d)
    if off.max(initial=0.0) > eps * scale or np.any(d <= 0):
        return False
    tol = eps * scale
    if np.all(d + tol >= np.abs(off).sum(axis=1)) or np.all(d + tol >= np.abs(off).sum(axis=0)):
        return True
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return False
    return bool(inv.min() >= -eps * max(1.0, np.abs(inv).max()))


def is_dominant_factor(op: LineOperator, eps: float = 1e-12) -> bool:
    """Positive diagonal and weak row diagonal dominance of a banded factor."""
    d = op.band(0)
    offsum = sum(np.abs(op.bands[k]) for k, o in enumerate(op.offsets) if o != 0)
    return bool(np.all(d > 0) and np.all(d * (1 + eps) >= offsum))


# ---------------------------------------------------------------- mixed pairs
def mixed_coefficients(pair: str, params: ModelParams, grid: Grid3D, t: float = 0.0):
    """Fields ``(alpha, gamma)`` with ``alpha*gamma`` the mixed-derivative coefficient.

    ``alpha`` carries the correlation and may vary anywhere; ``gamma`` does not
    depend on the first coordinate of the pair, so the one-dimensional factors
    commute.
    """
    S = grid.s.nodes[:, None, None]
    v = grid.v.nodes[None, :, None]
    R = grid.r.nodes[None, None, :]
    shape = grid.shape
    sig_s = params.sigma_s(S, v, t)
    sig_v = params.sigma_v(v)
    rho_t = np.tanh(R)
    if pair == "Sv":
        alpha, gamma = rho_t * sig_s, sig_v + 0 * R
    elif pair == "SR":
        alpha, gamma = rho_t * params.rho_vr * sig_s, params.xi_r + 0 * v
    elif pair == "vR":
        alpha, gamma = params.rho_vr * sig_v + 0 * R, params.xi_r + 0 * v
    else:
        raise ValueError(f"unknown pair {pair!r}")
    return np.broadcast_to(alpha, shape).copy(), np.broadcast_to(gamma, shape).copy()


def _boundary_mask(shape, axes) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    for ax in axes:
        idx = [slice(None)] * len(shape)
        idx[ax] = [0, shape[ax] - 1]
        m[tuple(idx)] = True
    return m


def _derivative_op(shape, ax, x, sign_field) -> LineOperator:
    """Second-order one-sided derivative along ``ax``: forward where the sign
    field is non-negative, backward elsewhere."""
    wf = one_sided_weights(x, "forward")
    wb = one_sided_weights(x, "backward")
    bshape = [1, 1, 1]
    bshape[ax] = x.size
    pos = sign_field >= 0
    bands = np.stack([np.where(pos, wf[k].reshape(bshape), wb[k].reshape(bshape)) for k in range(5)])
    return LineOperator(ax, (-2, -1, 0, 1, 2), bands)


@dataclass
class MixedFactorPair:
    """``C = I - a b`` with ``a = sqrt(dt) alpha D_x`` and ``b = sqrt(dt) gamma D_y``,
    factorized as ``(P - a)(Q + b) = C + N`` for the fixed-point solve."""

    pair: str
    a: LineOperator
    b: LineOperator
    P: np.ndarray
    Q: np.ndarray
    left: LineOperator
    right: LineOperator
    bound: float

    def __post_init__(self):
        self._lu = None

    @property
    def factors_lu(self):
        if self._lu is None:
            self._lu = (BandedLU(self.left), BandedLU(self.right))
        return self._lu

    def is_trivial(self) -> bool:
        return not np.any(self.a.bands) or not np.any(self.b.bands)

    def apply_C(self, x, transpose: bool = False):
        if transpose:
            return x - self.b.T.matvec(self.a.T.matvec(x))
        return x - self.a.matvec(self.b.matvec(x))

    def apply_N(self, x, transpose: bool = False):
        """``N = PQ - I + P b - Q a`` (the factored operator minus ``C``)."""
        if transpose:
            return (self.P * self.Q - 1) * x + self.b.T.matvec(self.P * x) - self.a.T.matvec(self.Q * x)
        return (self.P * self.Q - 1) * x + self.P * self.b.matvec(x) - self.Q * self.a.matvec(x)

    def solve_factored(self, rhs, transpose: bool = False):
        """Solve ``(P - a)(Q + b) x = rhs`` (or its transpose) by two banded sweeps."""
        lu_l, lu_r = self.factors_lu
        if transpose:
            if not hasattr(self, "_lu_t") or self._lu_t is None:
                self._lu_t = (BandedLU(self.left.T), BandedLU(self.right.T))
            lt, rt = self._lu_t
            return rt.solve(lt.solve(rhs))
        return lu_r.solve(lu_l.solve(rhs))

    def generator_sparse(self, dt: float) -> sp.csr_matrix:
        """The discrete mixed-derivative operator ``a b / dt``."""
        return (self.a.to_sparse() @ self.b.to_sparse()) / dt

    def factors_pass(self) -> bool:
        return is_dominant_factor(self.left) and is_dominant_factor(self.right)


def beta_bound(alpha, gamma, s_x, s_y) -> float:
    """Scan oracle for the smallest admissible factor scale."""
    return 1.5 * float(np.max(np.abs(gamma) / s_y + np.abs(alpha) / s_x))


def _scale_field(grid: Grid3D, ax: int) -> np.ndarray:
    x = grid.axes[ax].nodes
    # spatial scale of the coefficient along the axis: S for the spot axis
    # (the spot vol grows linearly in S), unity for v and R
    if ax == 0:
        h = grid.axes[ax].local_spacing()
        return np.maximum(x, h)
    return np.ones_like(x)


def build_mixed_factors(pair: str, alpha, gamma, beta: float | None, dt: float, grid: Grid3D,
                        check: bool = True) -> MixedFactorPair:
    """Factors of the implicit mixed step for one pair.

    ``beta=None`` gives the balanced factors ``P = Q = 1`` (used as a
    preconditioner). Otherwise ``P = beta sqrt(dt) s_x / h_x`` and
    ``Q = beta sqrt(dt) s_y / h_y`` with local spacing ``h`` and coefficient
    scale ``s``; a warning is raised if either factor loses diagonal dominance.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    ax, ay = PAIRS[pair]
    shape = grid.shape
    alpha = np.array(np.broadcast_to(alpha, shape), dtype=float)
    gamma = np.array(np.broadcast_to(gamma, shape), dtype=float)
    mask = _boundary_mask(shape, (ax, ay))
    alpha[mask] = 0.0
    if np.any(gamma < 0):
        # flip the sign into alpha so the y-derivative stays backward
        alpha = np.where(gamma < 0, -alpha, alpha)
        gamma = np.abs(gamma)
    gspread = np.ptp(gamma, axis=ax)
    if np.any(gspread > 1e-12 * (1 + np.abs(gamma).max())):
        raise ValueError("gamma must not vary along the first axis of the pair")
    sq = np.sqrt(dt)
    Dx = _derivative_op(shape, ax, grid.axes[ax].nodes, alpha)
    Dy = _derivative_op(shape, ay, grid.axes[ay].nodes, -np.ones(shape))
    a = LineOperator(ax, Dx.offsets, Dx.bands * (sq * alpha))
    b = LineOperator(ay, Dy.offsets, Dy.bands * (sq * gamma))
    sx = _scale_field(grid, ax)
    sy = _scale_field(grid, ay)
    bshape = lambda k: [len(grid.axes[k]) if i == k else 1 for i in range(3)]
    sx3 = sx.reshape(bshape(ax))
    sy3 = sy.reshape(bshape(ay))
    bound = beta_bound(alpha, gamma, sx3, sy3)
    if beta is None:
        P = np.ones(shape)
        Q = np.ones(shape)
    else:
        hx = grid.axes[ax].local_spacing().reshape(bshape(ax))
        hy = grid.axes[ay].local_spacing().reshape(bshape(ay))
        P = np.broadcast_to(beta * sq * sx3 / hx, shape).copy()
        Q = np.broadcast_to(beta * sq * sy3 / hy, shape).copy()
    left = (-a).shifted_identity(P)
    right = b.shifted_identity(Q)
    out = MixedFactorPair(pair, a, b, P, Q, left, right, bound)
    if check and beta is not None and not out.factors_pass():
        warnings.warn(f"{pair}: beta={beta} below the admissible bound {bound:.3g}; "
                      "mixed factors are not diagonally dominant", RuntimeWarning, stacklevel=2)
    return out


def central_mixed_operator(pair: str, alpha, gamma, grid: Grid3D):
    """``(a, b)`` with ``a b`` the central-difference mixed term ``alpha gamma d2/dxdy``."""
    ax, ay = PAIRS[pair]
    shape = grid.shape
    alpha = np.array(np.broadcast_to(alpha, shape), dtype=float)
    alpha[_boundary_mask(shape, (ax, ay))] = 0.0
    gamma = np.broadcast_to(gamma, shape)
    ops = []
    for axis, coef in ((ax, alpha), (ay, gamma)):
        d1 = _three_point(grid.axes[axis].nodes)[0]
        bshape = [1, 1, 1]
        bshape[axis] = len(grid.axes[axis])
        bands = np.zeros((3,) + shape)
        for k in range(3):
            w = np.zeros(len(grid.axes[axis]))
            w[1:-1] = d1[k]
            bands[k] = w.reshape(bshape) * coef
        ops.append(LineOperator(axis, (-1, 0, 1), bands))
    return ops[0], ops[1]


def mixed_factors_for(params: ModelParams, grid: Grid3D, t: float, dt: float, beta: float | None = None,
                      check: bool = True):
    """All three mixed pairs, skipping the ones with vanishing coefficient."""
    out = []
    for pair in PAIRS:
        alpha, gamma = mixed_coefficients(pair, params, grid, t)
        if not np.any(alpha) or not np.any(gamma):
            continue
        out.append(build_mixed_factors(pair, alpha, gamma, beta, dt, grid, check=check))
    return out
