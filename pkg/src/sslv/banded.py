"""Batched banded operators acting along one axis of a 3D field.

Each grid line orthogonal to ``axis`` carries its own banded matrix, stored as
diagonals indexed by offset: ``bands[k][idx]`` multiplies ``x[idx + offsets[k]]``
(shifted along ``axis``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


def shift(x: np.ndarray, o: int, axis: int) -> np.ndarray:
    """``y[i] = x[i + o]`` along ``axis``, zero outside the range."""
    if o == 0:
        return x
    y = np.zeros_like(x)
    n = x.shape[axis]
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if o > 0:
        src[axis], dst[axis] = slice(o, n), slice(0, n - o)
    else:
        src[axis], dst[axis] = slice(0, n + o), slice(-o, n)
    y[tuple(dst)] = x[tuple(src)]
    return y


@dataclass
class LineOperator:
    axis: int
    offsets: tuple
    bands: np.ndarray  # (len(offsets), *shape)

    @property
    def shape(self):
        return self.bands.shape[1:]

    @classmethod
    def zeros(cls, shape, axis, offsets=(-1, 0, 1)):
        return cls(axis, tuple(offsets), np.zeros((len(offsets),) + tuple(shape)))

    @classmethod
    def identity(cls, shape, axis):
        op = cls.zeros(shape, axis, (0,))
        op.bands[0] = 1.0
        return op

    def band(self, o: int) -> np.ndarray:
        return self.bands[self.offsets.index(o)]

    def with_offsets(self, offsets) -> "LineOperator":
        offsets = tuple(sorted(set(offsets) | set(self.offsets)))
        out = LineOperator.zeros(self.shape, self.axis, offsets)
        for k, o in enumerate(self.offsets):
            out.bands[offsets.index(o)] += self.bands[k]
        return out

    def __matmul__(self, x):
        return self.matvec(x)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        y = np.zeros_like(x, dtype=float)
        for k, o in enumerate(self.offsets):
            y += self.bands[k] * shift(x, o, self.axis)
        return y

    def transpose(self) -> "LineOperator":
        offs = tuple(sorted(-o for o in self.offsets))
        out = LineOperator.zeros(self.shape, self.axis, offs)
        for k, o in enumerate(self.offsets):
            out.bands[offs.index(-o)] = shift(self.bands[k], -o, self.axis)
        return out

    @property
    def T(self):
        return self.transpose()

    def scaled(self, c) -> "LineOperator":
        return LineOperator(self.axis, self.offsets, self.bands * c)

    def __add__(self, other: "LineOperator") -> "LineOperator":
        if other.axis != self.axis:
            raise ValueError("cannot add operators acting along different axes")
        offs = tuple(sorted(set(self.offsets) | set(other.offsets)))
        out = LineOperator.zeros(self.shape, self.axis, offs)
        for op in (self, other):
            for k, o in enumerate(op.offsets):
                out.bands[offs.index(o)] += op.bands[k]
        return out

    def __neg__(self):
        return self.scaled(-1.0)

    def __sub__(self, other):
        return self + (-other)

    def shifted_identity(self, diag, scale=1.0) -> "LineOperator":
        """``diag*I + scale*self`` with ``diag`` a scalar or field."""
        out = self.scaled(scale).with_offsets((0,))
        out.bands[out.offsets.index(0)] += diag
        return out

    def row_sums(self) -> np.ndarray:
        return self.matvec(np.ones(self.shape))

    def to_sparse(self) -> sp.csr_matrix:
        shape = self.shape
        n = int(np.prod(shape))
        idx = np.arange(n).reshape(shape)
        rows, cols, vals = [], [], []
        for k, o in enumerate(self.offsets):
            col = shift(idx + 1, o, self.axis) - 1  # -1 marks out of range
            ok = (col >= 0) & (self.bands[k] != 0)
            rows.append(idx[ok])
            cols.append(col[ok])
            vals.append(self.bands[k][ok])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n))

    def factorize(self) -> "BandedLU":
        return BandedLU(self)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.factorize().solve(rhs)


class BandedLU:
    """Gaussian elimination without pivoting, vectorized across all lines.

    Adequate for the diagonally dominant and triangular-dominated matrices this
    package factorizes; a zero pivot raises.
    """

    def __init__(self, op: LineOperator):
        self.axis = op.axis
        self.kl = max(0, -min(op.offsets))
        self.ku = max(0, max(op.offsets))
        kl, ku = self.kl, self.ku
        a = np.moveaxis(op.bands, op.axis + 1, -1)  # (nb, ..., n)
        self.line_shape = a.shape[1:-1]
        n = a.shape[-1]
        self.n = n
        # B[..., i, kl + d] = A[i, i + d]
        B = np.zeros(self.line_shape + (n, kl + ku + 1))
        for k, o in enumerate(op.offsets):
            B[..., :, kl + o] = a[k]
        L = np.zeros(self.line_shape + (n, kl + 1))
        for k in range(n):
            piv = B[..., k, kl]
            if np.any(piv == 0):
                raise np.linalg.LinAlgError("zero pivot in banded elimination")
            for i in range(k + 1, min(n, k + kl + 1)):
                f = B[..., i, kl + k - i] / piv
                L[..., i, kl + k - i] = f
                for j in range(k, min(n, k + ku + 1)):
                    B[..., i, kl + j - i] -= f * B[..., k, kl + j - k]
        self.U = B
        self.L = L

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        kl, ku, n = self.kl, self.ku, self.n
        y = np.array(np.moveaxis(rhs, self.axis, -1), dtype=float)
        for i in range(n):
            for k in range(max(0, i - kl), i):
                y[..., i] -= self.L[..., i, kl + k - i] * y[..., k]
        for i in range(n - 1, -1, -1):
            for j in range(i + 1, min(n, i + ku + 1)):
                y[..., i] -= self.U[..., i, kl + j - i] * y[..., j]
            y[..., i] /= self.U[..., i, kl]
        return np.moveaxis(y, -1, self.axis)
