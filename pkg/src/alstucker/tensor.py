"""Dense tensor kernels.

Dense tensors are plain ``float64`` numpy arrays with ``ndim >= 2``.  The
linearization used by :func:`vec` and by the unfoldings is column-major
(first index fastest), so that

    unfold(X, n) == U_n C_(n) (U_d kron ... kron U_{n+1} kron U_{n-1} ... kron U_1)^T

holds for Tucker tensors with ``numpy.kron``.  Mode indices are 0-based.
"""

import numpy as np


def as_tensor(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise ValueError(f"a tensor needs at least 2 modes, got ndim={X.ndim}")
    return X


def _check_mode(n, d):
    if not 0 <= n < d:
        raise IndexError(f"mode {n} out of range for a {d}-way tensor")


def _check_same_shape(X, Y):
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Y.shape}")


def vec(X):
    """Column-major vectorization."""
    return np.reshape(X, -1, order="F")


def unfold(X, n):
    """Mode-``n`` unfolding ``X_(n)`` of shape ``(I_n, prod_{j != n} I_j)``.

    Columns are the mode-``n`` fibers, ordered with the remaining indices
    varying first-index-fastest.
    """
    X = as_tensor(X)
    _check_mode(n, X.ndim)
    return np.reshape(np.moveaxis(X, n, 0), (X.shape[n], -1), order="F")


def fold(M, n, shape):
    """Inverse of :func:`unfold`."""
    M = np.asarray(M, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    _check_mode(n, len(shape))
    rest = shape[:n] + shape[n + 1:]
    if M.ndim != 2 or M.shape[0] != shape[n] or M.shape[1] != int(np.prod(rest)):
        raise ValueError(f"matrix of shape {M.shape} cannot be folded on mode {n} into {shape}")
    return np.moveaxis(np.reshape(M, (shape[n],) + rest, order="F"), 0, n)


def mode_product(X, n, U):
    """``X x_n U``, defined by ``[X x_n U]_(n) = U X_(n)``."""
    X = as_tensor(X)
    _check_mode(n, X.ndim)
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != X.shape[n]:
        raise ValueError(f"cannot multiply mode {n} of size {X.shape[n]} by a {U.shape} matrix")
    # contract axis n, then put the new axis back in place
    return np.moveaxis(np.tensordot(U, X, axes=(1, n)), 0, n)


def multi_mode_product(X, matrices, skip=None, transpose=False):
    """Apply ``X x_k M_k`` for every mode ``k`` except ``skip``.

    Entries of ``matrices`` that are ``None`` are treated as identities.  With
    ``transpose=True`` the transposes ``M_k^T`` are applied instead.
    """
    for k, M in enumerate(matrices):
        if k == skip or M is None:
            continue
        X = mode_product(X, k, M.T if transpose else M)
    return X


def inner(X, Y):
    X, Y = as_tensor(X), as_tensor(Y)
    _check_same_shape(X, Y)
    return float(np.vdot(X, Y))


def norm(X):
    return float(np.linalg.norm(as_tensor(X).ravel()))


def axpy(alpha, X, Y):
    """Elementwise ``alpha * X + Y``."""
    X, Y = as_tensor(X), as_tensor(Y)
    _check_same_shape(X, Y)
    return alpha * X + Y


def hadamard_dense(X, Y):
    X, Y = as_tensor(X), as_tensor(Y)
    _check_same_shape(X, Y)
    return X * Y


def kron_chain(matrices, skip):
    """``M_d kron ... kron M_1`` over all modes except ``skip`` (descending order)."""
    out = np.ones((1, 1))
    for k in reversed(range(len(matrices))):
        if k != skip:
            out = np.kron(out, matrices[k])
    return out
