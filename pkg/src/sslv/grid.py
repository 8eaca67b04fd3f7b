"""Non-uniform tensor grids in (S, v, R) and their geometric jump extensions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("spot", "variance", "correlation_transform")


@dataclass(frozen=True)
class Axis:
    nodes: np.ndarray
    kind: str = "spot"

    def __post_init__(self):
        x = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", x)
        x.setflags(write=False)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("an axis needs at least 3 nodes")
        if not np.all(np.diff(x) > 0):
            raise ValueError("axis nodes must be strictly increasing")
        if self.kind not in KINDS:
            raise ValueError(f"unknown axis kind {self.kind!r}")
        if self.kind == "variance" and x[0] < 0:
            raise ValueError("variance nodes must be non-negative")

    def __len__(self):
        return self.nodes.size

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    def local_spacing(self) -> np.ndarray:
        """Smaller of the two adjacent spacings at every node."""
        h = self.h
        out = np.empty(self.nodes.size)
        out[0], out[-1] = h[0], h[-1]
        out[1:-1] = np.minimum(h[:-1], h[1:])
        return out

    def index_of(self, value: float, tol: float = 1e-12) -> int:
        i = int(np.argmin(np.abs(self.nodes - value)))
        if abs(self.nodes[i] - value) > tol * max(1.0, abs(value)):
            raise ValueError(f"{value} is not a node of this axis")
        return i


def build_axis(count: int, center: float, span: tuple[float, float], concentration: float,
               kind: str = "spot", anchors=()) -> Axis:
    """Sinh-stretched nodes on ``span`` clustered around ``center``.

    ``concentration`` is the width of the fine region relative to the span;
    large values give a uniform grid. ``center`` and every value in ``anchors``
    are exact nodes (each segment between them is uniform in the stretched
    coordinate), which places barriers and the initial state on the grid.
    """
    lo, hi = map(float, span)
    if count < 5:
        raise ValueError(f"count must be at least 5, got {count}")
    if not lo < center < hi:
        raise ValueError(f"invalid span {span} for center {center}")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    alpha = concentration * (hi - lo)
    knots = sorted({lo, hi, float(center), *(float(a) for a in anchors)})
    if knots[0] < lo or knots[-1] > hi:
        raise ValueError("anchors must lie inside the span")
    xi = np.arcsinh((np.array(knots) - center) / alpha)
    lengths = np.diff(xi)
    ncell = count - 1
    if ncell < lengths.size:
        raise ValueError("too few nodes for the requested anchors")
    # largest-remainder allocation of cells to segments, at least one each
    share = lengths / lengths.sum() * ncell
    cells = np.maximum(np.floor(share).astype(int), 1)
    while cells.sum() < ncell:
        cells[np.argmax(share - cells)] += 1
    while cells.sum() > ncell:
        j = np.argmax(np.where(cells > 1, cells - share, -np.inf))
        cells[j] -= 1
    parts = []
    for a, b, n, k0, k1 in zip(xi[:-1], xi[1:], cells, knots[:-1], knots[1:]):
        seg = center + alpha * np.sinh(np.linspace(a, b, n + 1))
        seg[0], seg[-1] = k0, k1
        parts.append(seg[:-1])
    nodes = np.concatenate(parts + [np.array([hi])])
    return Axis(nodes, kind)


@dataclass(frozen=True)
class JumpAxis:
    """Diffusion axis embedded in a geometrically extended jump axis."""

    axis: Axis
    offset: int
    n_diffusion: int

    @property
    def nodes(self):
        return self.axis.nodes

    @property
    def diffusion_slice(self) -> slice:
        return slice(self.offset, self.offset + self.n_diffusion)

    def __len__(self):
        return len(self.axis)


def _progression(start: float, step: float, ratio: float, count: int, sign: int) -> np.ndarray:
    steps = step * ratio ** np.arange(1, count + 1)
    return start + sign * np.cumsum(steps)


def extend_to_jump_grid(axis, ratio: float = 1.4, extra=0) -> JumpAxis:
    """Append geometrically growing cells beyond the axis ends.

    ``extra`` is the number of upper nodes, or a pair ``(lower, upper)``.
    The first new cell is ``ratio`` times the adjacent boundary cell.
    """
    if not isinstance(axis, Axis):
        axis = Axis(np.asarray(axis, dtype=float))
    if not ratio > 1:
        raise ValueError("ratio must exceed 1")
    n_lo, n_hi = (0, int(extra)) if np.isscalar(extra) else map(int, extra)
    if n_lo < 0 or n_hi < 0:
        raise ValueError("extra must be non-negative")
    x = axis.nodes
    lower = _progression(x[0], x[1] - x[0], ratio, n_lo, -1)[::-1]
    upper = _progression(x[-1], x[-1] - x[-2], ratio, n_hi, +1)
    if axis.kind == "variance" and n_lo and lower[0] < 0:
        raise ValueError("lower extension of a variance axis crosses zero")
    nodes = np.concatenate([lower, x, upper])
    return JumpAxis(Axis(nodes, axis.kind), offset=n_lo, n_diffusion=x.size)


def locate_barrier(axis: Axis, level: float, side: str = "lower", tol: float = 1e-10) -> int:
    """Index of the node at which an absorbing barrier is imposed.

    A lower barrier snaps down to the last node at or below ``level``; an
    upper barrier snaps up to the first node at or above it.
    """
    x = axis.nodes
    slack = tol * max(1.0, abs(level))
    if level < x[0] - slack or level > x[-1] + slack:
        raise ValueError(f"barrier {level} outside axis range [{x[0]}, {x[-1]}]")
    if side == "lower":
        return int(np.searchsorted(x, level + slack, side="right") - 1)
    if side == "upper":
        return int(np.searchsorted(x, level - slack, side="left"))
    raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")


@dataclass(frozen=True)
class Grid3D:
    s: Axis
    v: Axis
    r: Axis
    # index box of the diffusion domain inside a jump-extended grid
    box: tuple[slice, slice, slice] = field(default=(slice(None),) * 3)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (len(self.s), len(self.v), len(self.r))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def axes(self) -> tuple[Axis, Axis, Axis]:
        return (self.s, self.v, self.r)

    def flatten_index(self, i, j, k):
        return np.ravel_multi_index((i, j, k), self.shape)

    def unflatten_index(self, n):
        return np.unravel_index(n, self.shape)

    def mesh(self):
        return np.meshgrid(self.s.nodes, self.v.nodes, self.r.nodes, indexing="ij")

    def nearest_node(self, S: float, v: float, R: float) -> tuple[int, int, int]:
        return tuple(int(np.argmin(np.abs(ax.nodes - x))) for ax, x in zip(self.axes, (S, v, R)))

    def diffusion_grid(self) -> "Grid3D":
        """The sub-grid on which diffusion operators act."""
        axes = [Axis(ax.nodes[sl], ax.kind) for ax, sl in zip(self.axes, self.box)]
        return Grid3D(*axes)

    def has_extension(self) -> bool:
        return tuple(self.diffusion_grid().shape) != self.shape


@dataclass(frozen=True)
class GridSpec:
    """Recipe for the default experiment grids."""

    n_s: int = 101
    n_v: int = 81
    n_r: int = 81
    s_max_mult: float = 8.0
    v_max: float = 2.0
    r_halfwidth: float | None = None
    s_concentration: float = 0.03
    v_concentration: float = 0.1
    r_concentration: float = 0.3
    ratio: float = 1.4
    extra_s: tuple[int, int] = (0, 0)
    extra_v: tuple[int, int] = (0, 0)
    extra_r: tuple[int, int] = (0, 0)


def build_grid(S0: float, v0: float, R0: float, spec: GridSpec = GridSpec(), T: float = 1.0,
               xi_r: float = 0.0, s_anchors=()) -> Grid3D:
    """Grid centered on the initial state, optionally jump-extended."""
    half = spec.r_halfwidth
    if half is None:
        half = max(3.0, 5.0 * xi_r * np.sqrt(T))
    s = build_axis(spec.n_s, S0, (0.0, spec.s_max_mult * S0), spec.s_concentration, "spot", s_anchors)
    v = build_axis(spec.n_v, v0, (0.0, spec.v_max), spec.v_concentration, "variance")
    r = build_axis(spec.n_r, R0, (R0 - half, R0 + half), spec.r_concentration, "correlation_transform")
    ext = [extend_to_jump_grid(ax, spec.ratio, e)
           for ax, e in zip((s, v, r), (spec.extra_s, spec.extra_v, spec.extra_r))]
    return Grid3D(ext[0].axis, ext[1].axis, ext[2].axis,
                  box=tuple(e.diffusion_slice for e in ext))


def time_grid(T: float, dt: float) -> np.ndarray:
    """Uniform steps of ``dt`` with a final short step if ``dt`` does not divide ``T``."""
    if T < 0 or not dt > 0:
        raise ValueError("need T >= 0 and dt > 0")
    n = int(np.floor(T / dt + 1e-9))
    t = dt * np.arange(n + 1)
    if T - t[-1] > 1e-12 * max(1.0, T):
        t = np.append(t, T)
    t[-1] = T
    return t
