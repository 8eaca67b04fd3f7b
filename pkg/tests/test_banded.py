import numpy as np
from hypothesis import given, strategies as st

from sslv.banded import LineOperator, shift


def _random_op(rng, shape, axis, offsets, dominant=True):
    op = LineOperator.zeros(shape, axis, offsets)
    op.bands[:] = rng.uniform(-1, 1, op.bands.shape)
    if dominant:
        op.bands[offsets.index(0)] = np.abs(op.bands).sum(axis=0) + 1.0
    # entries that would reach outside the line are irrelevant; zero them
    n = shape[axis]
    for k, o in enumerate(offsets):
        idx = np.arange(n)
        bad = (idx + o < 0) | (idx + o >= n)
        sl = [slice(None)] * 3
        sl[axis] = bad
        op.bands[k][tuple(sl)] = 0.0
    return op


@given(st.integers(0, 2), st.sampled_from([(-1, 0, 1), (-2, -1, 0, 1, 2), (0, 1, 2), (-2, -1, 0)]),
       st.integers(0, 2**31))
def test_matvec_transpose_solve_match_dense(axis, offsets, seed):
    rng = np.random.default_rng(seed)
    shape = (5, 4, 6)
    op = _random_op(rng, shape, axis, offsets)
    A = op.to_sparse().toarray()
    x = rng.normal(size=shape)
    np.testing.assert_allclose(op.matvec(x).ravel(), A @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.T.matvec(x).ravel(), A.T @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(op.solve(x).ravel(), np.linalg.solve(A, x.ravel()), atol=1e-10)


def test_shift_zero_fill():
    x = np.arange(5.0)
    np.testing.assert_array_equal(shift(x, 1, 0), [1, 2, 3, 4, 0])
    np.testing.assert_array_equal(shift(x, -2, 0), [0, 0, 0, 1, 2])


def test_shifted_identity_and_arithmetic(rng):
    shape = (4, 3, 3)
    a = _random_op(rng, shape, 1, (-1, 0, 1), dominant=False)
    b = _random_op(rng, shape, 1, (0, 1, 2), dominant=False)
    A, B = a.to_sparse().toarray(), b.to_sparse().toarray()
    np.testing.assert_allclose((a + b).to_sparse().toarray(), A + B)
    np.testing.assert_allclose((a - b).to_sparse().toarray(), A - B)
    np.testing.assert_allclose(a.shifted_identity(2.0, -0.5).to_sparse().toarray(), 2 * np.eye(A.shape[0]) - 0.5 * A)
    np.testing.assert_allclose(a.row_sums().ravel(), A.sum(axis=1))
