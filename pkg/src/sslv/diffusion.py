"""Splitting time steps for the three-dimensional diffusion part.

``forward_step`` advances a density with the fully implicit splitting scheme
built on transposed operators; ``backward_step`` is its exact adjoint and
advances a value function. With ``explicit=True`` both use explicit
mixed-derivative stages, in which form the backward step is the classical
Hundsdorfer-Verwer scheme and the forward step its transpose.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .banded import BandedLU
from .grid import Grid3D
from .model import ModelParams
from .operators import (PAIRS, MixedFactorPair, build_mixed_factors, central_mixed_operator, discretize_F,
                        mixed_coefficients)


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=np.nan, iterations=0):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PicardConfig:
    """How the implicit mixed-derivative systems are solved.

    ``method="picard"`` iterates with the ``beta``-scaled factors;
    ``"gmres"`` uses the balanced factors as a preconditioner for a Krylov
    solve; ``"direct"`` factorizes the sparse system (small grids).
    """

    beta: float = 10.0
    tol: float = 1e-8
    max_iters: int = 10
    method: str = "gmres"
    krylov_tol: float = 1e-12
    krylov_maxiter: int = 400

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1:
            raise ValueError("need tol > 0 and max_iters >= 1")
        if self.method not in ("picard", "gmres", "direct"):
            raise ValueError(f"unknown mixed solver {self.method!r}")


@dataclass(frozen=True)
class SchemeConfig:
    theta: float = 0.3
    explicit: bool = False
    mixed: PicardConfig = PicardConfig()
    # stencil of the explicit mixed stages: "one_sided" products (as in the
    # implicit factors) or classical central differences
    mixed_stencil: str = "one_sided"

    def __post_init__(self):
        if self.mixed_stencil not in ("one_sided", "central"):
            raise ValueError(f"unknown mixed stencil {self.mixed_stencil!r}")
        if self.mixed_stencil == "central" and not self.explicit:
            raise ValueError("central mixed stencils are only available with explicit=True")


def _apply_mixed_pair(field_, pair: MixedFactorPair, dt, cfg: PicardConfig, transpose=False,
                      precond: MixedFactorPair | None = None, cache=None, stats=None):
    if pair.is_trivial():
        return field_.copy()
    shape = field_.shape
    if cfg.method == "direct":
        key = (pair.pair, transpose)
        lu = None if cache is None else cache.get(key)
        if lu is None:
            n = field_.size
            C = sp.identity(n, format="csc") - (pair.a.to_sparse() @ pair.b.to_sparse()).tocsc()
            lu = spla.splu(C.T.tocsc() if transpose else C)
            if cache is not None:
                cache[key] = lu
        out = lu.solve(field_.ravel()).reshape(shape)
        if stats is not None:
            stats.append(1)
        return out
    if cfg.method == "picard":
        x = field_.copy()
        scale = max(np.abs(field_).max(), 1e-300)
        upd = np.inf
        for k in range(1, cfg.max_iters + 1):
            new = pair.solve_factored(field_ + pair.apply_N(x, transpose), transpose)
            upd = np.abs(new - x).max() / max(np.abs(new).max(), scale)
            x = new
            if upd < cfg.tol:
                if stats is not None:
                    stats.append(k)
                return x
        raise ConvergenceError(f"{pair.pair}: Picard update {upd:.3e} after {cfg.max_iters} iterations",
                               residual=upd, iterations=cfg.max_iters)
    # preconditioned Krylov solve
    pre = precond if precond is not None else pair
    n = field_.size
    A = spla.LinearOperator((n, n), matvec=lambda y: pair.apply_C(y.reshape(shape), transpose).ravel())
    M = spla.LinearOperator((n, n), matvec=lambda y: pre.solve_factored(y.reshape(shape), transpose).ravel())
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = spla.gmres(A, field_.ravel(), x0=field_.ravel(), rtol=cfg.krylov_tol, atol=0.0,
                         restart=60, maxiter=cfg.krylov_maxiter, M=M, callback=cb,
                         callback_type="pr_norm")
    if info != 0:
        res = np.linalg.norm(A @ x - field_.ravel()) / max(np.linalg.norm(field_), 1e-300)
        raise ConvergenceError(f"{pair.pair}: GMRES stopped with residual {res:.3e}", residual=res,
                               iterations=count[0])
    if stats is not None:
        stats.append(count[0])
    return x.reshape(shape)


def apply_mixed_exponential(field_, pair: MixedFactorPair, jump_covariance_constant: float, dt: float,
                            cfg: PicardConfig = PicardConfig(), transpose: bool = False,
                            precond: MixedFactorPair | None = None, cache=None, stats=None):
    """First-order implicit action of ``exp(dt (F_pair + c))`` on a field.

    The jump covariance ``c = b_i b_j Var(Z)`` enters as a scalar factor;
    the mixed-derivative part solves ``(I - a b) x = field`` (transposed for
    densities) using the solver selected in ``cfg``.
    """
    out = _apply_mixed_pair(np.asarray(field_, dtype=float), pair, dt, cfg, transpose, precond, cache, stats)
    if jump_covariance_constant:
        out = out * np.exp(dt * jump_covariance_constant)
    return out


class LevelOps:
    """Operators frozen at one time level, with cached factorizations."""

    def __init__(self, params: ModelParams, grid: Grid3D, t: float, dt: float,
                 scheme: SchemeConfig = SchemeConfig(), discount: bool = False, frozen=None):
        self.t, self.dt, self.theta = t, dt, scheme.theta
        self.scheme = scheme
        self.shape = grid.shape
        self.F = [discretize_F(d, params, grid, t, discount=discount) for d in ("S", "v", "R")]
        if frozen is not None:
            # absorbing spot nodes: their backward rows vanish, so a density
            # can flow into them but never back out within the step
            for f in self.F:
                f.bands[:, frozen] = 0.0
        self.active = [bool(np.any(f.bands)) for f in self.F]
        self._lu = {}
        self._mixed_cache = {}
        self.stats: list[int] = []
        cfg = scheme.mixed
        self.pairs = []
        self.preconds = []
        self.central = []
        for name in PAIRS:
            alpha, gamma = mixed_coefficients(name, params, grid, t)
            if frozen is not None:
                alpha[frozen] = 0.0
            if not np.any(alpha) or not np.any(gamma):
                continue
            explicit = scheme.explicit
            if scheme.mixed_stencil == "central":
                self.central.append(central_mixed_operator(name, alpha, gamma, grid))
                continue
            beta = cfg.beta if cfg.method == "picard" else None
            p = build_mixed_factors(name, alpha, gamma, beta, dt, grid, check=not explicit)
            self.pairs.append(p)
            if cfg.method == "gmres" and not explicit:
                self.preconds.append(p)
            else:
                self.preconds.append(None)

    # 1D pieces
    def _factor(self, i, scale, transpose):
        key = (i, scale, transpose)
        if key not in self._lu:
            op = self.F[i].T if transpose else self.F[i]
            self._lu[key] = BandedLU(op.shifted_identity(1.0, -scale * self.dt))
        return self._lu[key]

    def solve_M(self, i, x, transpose=False):
        """``(I - theta dt F_i)^{-1} x``."""
        if not self.active[i]:
            return x.copy()
        return self._factor(i, self.theta, transpose).solve(x)

    def solve_K(self, i, x, transpose=False):
        """``(I - dt F_i)^{-1} x``."""
        if not self.active[i]:
            return x.copy()
        return self._factor(i, 1.0, transpose).solve(x)

    def apply_Fi(self, i, x, transpose=False):
        if not self.active[i]:
            return np.zeros_like(x)
        return (self.F[i].T if transpose else self.F[i]).matvec(x)

    def apply_F0(self, x, transpose=False):
        out = np.zeros_like(x)
        for a, b in self.central:
            out += b.T.matvec(a.T.matvec(x)) if transpose else a.matvec(b.matvec(x))
        for p in self.pairs:
            if transpose:
                out += p.b.T.matvec(p.a.T.matvec(x)) / self.dt
            else:
                out += p.a.matvec(p.b.matvec(x)) / self.dt
        return out

    def apply_F(self, x, transpose=False):
        return self.apply_F0(x, transpose) + sum(self.apply_Fi(i, x, transpose) for i in range(3))

    def mixed_solve(self, k, x, transpose=False):
        return apply_mixed_exponential(x, self.pairs[k], 0.0, self.dt, self.scheme.mixed, transpose,
                                       precond=self.preconds[k], cache=self._mixed_cache, stats=self.stats)

    def apply_E(self, x, transpose=False):
        """One-step propagator ``E ~ I + dt F`` (or its transpose).

        Implicit form: ``E = K3^{-1} K2^{-1} K1^{-1} X_vR X_SR X_Sv`` with
        ``K_i = I - dt F_i`` and ``X`` the implicit mixed solves.
        """
        if self.scheme.explicit:
            return x + self.dt * self.apply_F(x, transpose)
        y = x
        if not transpose:
            for k in range(len(self.pairs)):
                y = self.mixed_solve(k, y)
            for i in range(3):
                y = self.solve_K(i, y)
        else:
            for i in (2, 1, 0):
                y = self.solve_K(i, y, transpose=True)
            for k in reversed(range(len(self.pairs))):
                y = self.mixed_solve(k, y, transpose=True)
        return y

    def apply_L(self, i, x, transpose=False):
        """``(I + theta dt F_i) x``, the explicit counterpart of ``solve_M``."""
        return x + self.theta * self.dt * self.apply_Fi(i, x, transpose)


def forward_step(p_prev, ops_n: LevelOps, ops_prev: LevelOps):
    """Advance a density by one step.

    ``ops_n`` holds the operators at the start of the forward step and
    ``ops_prev`` those at its end (backward-time levels n and n-1).
    """
    if ops_n.scheme.explicit:
        return _forward_step_explicit(p_prev, ops_n, ops_prev)
    a, b = ops_n, ops_prev
    G = lambda i, x: a.solve_M(i, x, transpose=True)
    H = lambda i, x: b.solve_M(i, x, transpose=True)
    p = p_prev
    Y3 = G(2, p)
    Y2 = G(1, Y3)
    Y1 = G(0, Y2)
    Z0 = a.apply_E(Y1, transpose=True)
    Yb = [G(0, Y1), G(1, Y2), G(2, Y3)]
    Yt0 = p + (Y2 - Yb[1]) + (Y3 - Yb[2]) + 0.5 * (Y1 + Z0) - Yb[0]
    Yt3 = H(2, Yt0)
    Yt2 = H(1, Yt3)
    Yt1 = H(0, Yt2)
    Z2 = b.apply_E(Yt1, transpose=True)
    Y = [Y1, Y2, Y3]
    Yt = [Yt1, Yt2, Yt3]
    out = Z2 + 0.5 * (Y1 - Z0)
    for i in range(3):
        out = out + (Yt[i] - Y[i] + Yb[i] - G(i, Yt[i]))
    return out


def _forward_step_explicit(p_prev, a: LevelOps, b: LevelOps):
    """Transposed classical scheme (explicit mixed stages).

    The increments ``dY`` are the level-``b`` sweep applied to the correction
    ``Yt0 - p``, which keeps the step the exact transpose of the backward
    scheme when the coefficients change between the two levels.
    """
    th, dt = a.theta, a.dt
    Y3 = a.solve_M(2, p_prev, True)
    Y2 = a.solve_M(1, Y3, True)
    Y1 = a.solve_M(0, Y2, True)
    Y = [Y1, Y2, Y3]
    q = -dt * th * (sum(a.apply_Fi(i, Y[i], True) for i in range(3)) - a.apply_F(Y1, True) / (2 * th))
    d3 = b.solve_M(2, q, True)
    d2 = b.solve_M(1, d3, True)
    d1 = b.solve_M(0, d2, True)
    dY = [d1, d2, d3]
    Z1 = Y1 + 0.5 * dt * b.apply_F(Y1, True)
    Z2 = dY[0] + dt * b.apply_F(dY[0], True)
    return Z1 - dt * th * sum(b.apply_Fi(i, dY[i], True) for i in range(3)) + Z2


def backward_step(V_prev, ops_n: LevelOps, ops_prev: LevelOps):
    """Advance a value function one step backward in calendar time.

    The implicit form is the exact adjoint of ``forward_step``; the explicit
    form is the classical splitting scheme written in compressed operator
    form. Discounting is carried by the operators (``discount=True``).
    """
    if ops_n.scheme.explicit:
        return _backward_step_explicit(V_prev, ops_n, ops_prev)
    a, b = ops_n, ops_prev
    V = V_prev
    Ga = lambda i, x: a.solve_M(i, x)
    Gb = lambda i, x: b.solve_M(i, x)
    # reverse-mode sweep through the forward step
    yt_bar = [V - Ga(i, V) for i in range(3)]
    yb_bar = [V.copy() for _ in range(3)]
    y_bar = [-V.copy() for _ in range(3)]
    y_bar[0] = y_bar[0] + 0.5 * V
    z0_bar = -0.5 * V
    yt_bar[0] = yt_bar[0] + b.apply_E(V)
    yt_bar[1] = yt_bar[1] + Gb(0, yt_bar[0])
    yt_bar[2] = yt_bar[2] + Gb(1, yt_bar[1])
    yt0_bar = Gb(2, yt_bar[2])
    p_bar = yt0_bar.copy()
    y_bar[1] = y_bar[1] + yt0_bar
    y_bar[2] = y_bar[2] + yt0_bar
    y_bar[0] = y_bar[0] + 0.5 * yt0_bar
    z0_bar = z0_bar + 0.5 * yt0_bar
    for i in range(3):
        yb_bar[i] = yb_bar[i] - yt0_bar
        y_bar[i] = y_bar[i] + Ga(i, yb_bar[i])
    y_bar[0] = y_bar[0] + a.apply_E(z0_bar)
    y_bar[1] = y_bar[1] + Ga(0, y_bar[0])
    y_bar[2] = y_bar[2] + Ga(1, y_bar[1])
    p_bar = p_bar + Ga(2, y_bar[2])
    return p_bar


def _backward_step_explicit(V, a: LevelOps, b: LevelOps):
    th, dt = a.theta, a.dt
    # first implicit sweep (level n-1) gives R3 V
    Y1 = b.solve_M(0, V + dt * b.apply_F(V) - dt * th * b.apply_Fi(0, V))
    Y2 = b.solve_M(1, Y1 - dt * th * b.apply_Fi(1, V))
    R3V = b.solve_M(2, Y2 - dt * th * b.apply_Fi(2, V))
    W1 = a.solve_M(0, V - dt * th * a.apply_Fi(0, R3V) + 0.5 * dt * (b.apply_F(V) + a.apply_F(R3V)))
    W2 = a.solve_M(1, W1 - dt * th * a.apply_Fi(1, R3V))
    return a.solve_M(2, W2 - dt * th * a.apply_Fi(2, R3V))


class StepOperators:
    """Supplies ``LevelOps`` per time level, reusing them when coefficients are constant."""

    def __init__(self, params: ModelParams, grid: Grid3D, scheme: SchemeConfig = SchemeConfig(),
                 discount: bool = False, frozen=None):
        """``frozen(t)`` may return a boolean mask over the spot nodes that
        are absorbing at time ``t`` (or None)."""
        self.params, self.grid, self.scheme, self.discount = params, grid, scheme, discount
        self.frozen = frozen
        self._cache: dict = {}
        self.stats: list[int] = []

    def level(self, t: float, dt: float) -> LevelOps:
        mask = None if self.frozen is None else self.frozen(t)
        key = (0.0 if not self.params.is_time_dependent() else round(t, 12), round(dt, 14),
               None if mask is None else np.flatnonzero(mask).tobytes())
        ops = self._cache.get(key)
        if ops is None:
            if len(self._cache) > 4:
                self._cache.pop(next(iter(self._cache)))
            ops = LevelOps(self.params, self.grid, t, dt, self.scheme, self.discount, mask)
            ops.stats = self.stats
            self._cache[key] = ops
        return ops

    def forward(self, p, t, dt):
        return forward_step(p, self.level(t, dt), self.level(t + dt, dt))

    def backward(self, V, t, dt):
        """Map values at ``t + dt`` to values at ``t``."""
        return backward_step(V, self.level(t, dt), self.level(t + dt, dt))
