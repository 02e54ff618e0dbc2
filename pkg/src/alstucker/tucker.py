"""Tucker tensors with orthonormal factors and structured arithmetic on them."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .linalg import orthonormal_complement, qr_positive


@dataclass(frozen=True)
class TuckerTensor:
    """``core x_1 U_1 x_2 ... x_d U_d`` with ``U_k`` of shape ``(I_k, r_k)``.

    Factors are expected to have orthonormal columns; every function in this
    module that builds a TuckerTensor restores that property.
    """

    core: np.ndarray
    factors: tuple

    def __post_init__(self):
        core = tn.as_tensor(self.core)
        factors = tuple(np.asarray(U, dtype=np.float64) for U in self.factors)
        if len(factors) != core.ndim:
            raise ValueError(f"{core.ndim}-way core needs {core.ndim} factors, got {len(factors)}")
        for k, U in enumerate(factors):
            if U.ndim != 2 or U.shape[1] != core.shape[k]:
                raise ValueError(f"factor {k} of shape {U.shape} does not match core mode size {core.shape[k]}")
            if U.shape[1] > U.shape[0]:
                raise ValueError(f"rank {U.shape[1]} exceeds mode size {U.shape[0]} in mode {k}")
        object.__setattr__(self, "core", core)
        object.__setattr__(self, "factors", factors)

    @property
    def ndim(self):
        return self.core.ndim

    @property
    def shape(self):
        return tuple(U.shape[0] for U in self.factors)

    @property
    def rank(self):
        return self.core.shape

    def to_full(self):
        return to_full(self)

    def norm(self):
        """Norm of the represented tensor (assumes orthonormal factors)."""
        return tn.norm(self.core)

    def orthonormality_defect(self):
        """Largest ``max|U_k^T U_k - I|`` over all modes."""
        return max(
            float(np.abs(U.T @ U - np.eye(U.shape[1])).max()) for U in self.factors
        )

    def scaled(self, alpha):
        return TuckerTensor(alpha * self.core, self.factors)


def _rank_vector(rank, shape):
    if np.isscalar(rank):
        rank = (int(rank),) * len(shape)
    rank = tuple(int(r) for r in rank)
    if len(rank) != len(shape):
        raise ValueError(f"rank vector {rank} does not match a {len(shape)}-way tensor")
    for r, n in zip(rank, shape):
        if not 1 <= r <= n:
            raise ValueError(f"rank {rank} is not admissible for shape {shape}")
    return rank


def to_full(Y):
    return tn.multi_mode_product(Y.core, Y.factors)


def orthonormalize(core, factors):
    """Tucker tensor equal to ``core x_k factors[k]`` with orthonormal factors.

    Each factor is replaced by its thin-QR ``Q`` and the ``R`` is absorbed
    into the core.  Factors with more columns than rows shrink to square.
    """
    Qs, Rs = zip(*(qr_positive(F) for F in factors))
    return TuckerTensor(tn.multi_mode_product(core, Rs), Qs)


def gauge_rotate(Y, rotations, tol=1e-10):
    """Rotate factors ``U_k Q_k`` and counter-rotate the core by ``Q_k^T``."""
    if len(rotations) != Y.ndim:
        raise ValueError("need one rotation per mode")
    for k, Q in enumerate(rotations):
        Q = np.asarray(Q, dtype=np.float64)
        if Q.shape != (Y.rank[k],) * 2 or np.abs(Q.T @ Q - np.eye(Q.shape[0])).max() > tol:
            raise ValueError(f"rotation for mode {k} is not an orthogonal {Y.rank[k]}x{Y.rank[k]} matrix")
    core = tn.multi_mode_product(Y.core, rotations, transpose=True)
    return TuckerTensor(core, tuple(U @ Q for U, Q in zip(Y.factors, rotations)))


def pad_rank(Y, rank, bases=None):
    """Embed ``Y`` into a larger rank with a zero-padded core.

    New factor columns are orthonormal and orthogonal to the existing ones.
    They come from orthogonalizing the columns of ``bases[k]`` (one matrix
    per mode, tried in order) when given, otherwise from a complete QR of
    ``U_k``.
    """
    rank = _rank_vector(rank, Y.shape)
    if any(r < s for r, s in zip(rank, Y.rank)):
        raise ValueError(f"cannot pad rank {Y.rank} down to {rank}")
    core = np.zeros(rank)
    core[tuple(slice(0, s) for s in Y.rank)] = Y.core
    factors = []
    for k, (U, r) in enumerate(zip(Y.factors, rank)):
        extra = r - U.shape[1]
        if extra == 0:
            factors.append(U)
            continue
        if bases is None:
            factors.append(np.hstack([U, orthonormal_complement(U, extra)]))
        else:
            factors.append(_extend_with_basis(U, bases[k], extra))
    return TuckerTensor(core, tuple(factors))


def _extend_with_basis(U, basis, extra):
    # greedy Gram-Schmidt of candidate columns against U
    cols = [U[:, j] for j in range(U.shape[1])]
    for v in np.asarray(basis, dtype=np.float64).T:
        if len(cols) == U.shape[1] + extra:
            break
        w = v.copy()
        for _ in range(2):
            for c in cols:
                w -= (c @ w) * c
        if np.linalg.norm(w) > 1e-8 * np.linalg.norm(v):
            cols.append(w / np.linalg.norm(w))
    if len(cols) < U.shape[1] + extra:
        Q = np.column_stack(cols)
        return np.hstack([Q, orthonormal_complement(Q, U.shape[1] + extra - Q.shape[1])])
    return np.column_stack(cols)


def _leading_left_singular_vectors(M, r):
    U = np.linalg.svd(M, full_matrices=False)[0]
    return U[:, :r]


def hosvd(A, rank):
    """Truncated higher-order SVD: leading left singular vectors of each unfolding."""
    A = tn.as_tensor(A)
    rank = _rank_vector(rank, A.shape)
    factors = tuple(
        _leading_left_singular_vectors(tn.unfold(A, k), r) for k, r in enumerate(rank)
    )
    return TuckerTensor(tn.multi_mode_product(A, factors, transpose=True), factors)


def hooi(A, rank, tol=1e-8, max_sweeps=50, return_history=False):
    """Higher-order orthogonal iteration, initialized by :func:`hosvd`.

    Each sweep replaces ``U_n`` by the leading left singular vectors of
    ``[A x_{k != n} U_k^T]_(n)``, which never decreases the core norm
    ``||A x_k U_k^T||``.  Iteration stops once the relative change of the
    core norm drops below ``tol`` or after ``max_sweeps`` sweeps.

    With ``return_history=True`` the list of core norms (the HOSVD start
    followed by one entry per sweep) is returned as well.
    """
    A = tn.as_tensor(A)
    Y = hosvd(A, rank)
    rank = Y.rank
    factors = list(Y.factors)
    fit = tn.norm(Y.core)
    history = [fit]
    tiny = np.finfo(np.float64).tiny
    core = Y.core
    for _ in range(max_sweeps):
        for n in range(A.ndim):
            Z = tn.multi_mode_product(A, factors, skip=n, transpose=True)
            factors[n] = _leading_left_singular_vectors(tn.unfold(Z, n), rank[n])
        core = tn.mode_product(Z, A.ndim - 1, factors[-1].T)
        new_fit = tn.norm(core)
        history.append(new_fit)
        converged = abs(new_fit - fit) <= tol * max(fit, tiny)
        fit = new_fit
        if converged:
            break
    Y = TuckerTensor(core, tuple(factors))
    return (Y, history) if return_history else Y


def recompress(Y, rank, tol=1e-8, max_sweeps=50):
    """HOOI truncation of a Tucker tensor without forming the dense tensor.

    With orthonormal factors, ``Y`` and its core differ by an isometry, so
    HOOI runs on the core and the resulting small factors are mapped back.
    If the target rank exceeds what the core supports, the result is padded
    with orthonormal complement columns and zero core slices.
    """
    rank = _rank_vector(rank, Y.shape)
    inner_rank = tuple(min(r, s) for r, s in zip(rank, Y.rank))
    Z = hooi(Y.core, inner_rank, tol=tol, max_sweeps=max_sweeps)
    out = TuckerTensor(Z.core, tuple(U @ W for U, W in zip(Y.factors, Z.factors)))
    return pad_rank(out, rank) if inner_rank != rank else out


def tucker_sum(Ys: Sequence[TuckerTensor], coeffs=None):
    """``sum_i coeffs[i] * Ys[i]`` with concatenated factors and block-diagonal core."""
    Ys = list(Ys)
    if not Ys:
        raise ValueError("tucker_sum needs at least one term")
    coeffs = [1.0] * len(Ys) if coeffs is None else list(coeffs)
    if len(coeffs) != len(Ys):
        raise ValueError("one coefficient per term is required")
    shape = Ys[0].shape
    for Y in Ys[1:]:
        if Y.shape != shape:
            raise ValueError(f"shape mismatch: {Y.shape} vs {shape}")
    total = tuple(sum(Y.rank[k] for Y in Ys) for k in range(len(shape)))
    core = np.zeros(total)
    offsets = [0] * len(shape)
    for Y, c in zip(Ys, coeffs):
        block = tuple(slice(o, o + r) for o, r in zip(offsets, Y.rank))
        core[block] = c * Y.core
        offsets = [o + r for o, r in zip(offsets, Y.rank)]
    factors = [np.hstack([Y.factors[k] for Y in Ys]) for k in range(len(shape))]
    return orthonormalize(core, factors)


def tucker_hadamard(Y1, Y2):
    """Elementwise product of two Tucker tensors.

    Mode-``k`` factor columns are all products ``u_i * v_j`` (a transposed
    Khatri-Rao product, index ``i + r_i * j``) and the core is the matching
    Kronecker product of the two cores.  Ranks multiply; whenever a product
    rank exceeds the mode size the thin QR caps it at the mode size without
    loss.
    """
    if Y1.shape != Y2.shape:
        raise ValueError(f"shape mismatch: {Y1.shape} vs {Y2.shape}")
    d = Y1.ndim
    factors = [
        (U[:, :, None] * V[:, None, :]).reshape(U.shape[0], -1, order="F")
        for U, V in zip(Y1.factors, Y2.factors)
    ]
    outer = np.multiply.outer(Y1.core, Y2.core)
    interleave = [ax for k in range(d) for ax in (k, d + k)]
    merged = tuple(r1 * r2 for r1, r2 in zip(Y1.rank, Y2.rank))
    core = np.transpose(outer, interleave).reshape(merged, order="F")
    return orthonormalize(core, factors)


def apply_kron_sum_operator(operators, Y):
    """``sum_k Y x_k K_k`` for square per-mode matrices ``K_k``.

    Every mode shares ``U_k`` across all terms but one, so the result is built
    with factors ``[U_k, K_k U_k]`` (rank ``2 r_k`` before the QR cap) and a
    core carrying one copy of ``Y.core`` per term.
    """
    if len(operators) != Y.ndim:
        raise ValueError("need one operator per mode")
    for k, K in enumerate(operators):
        K = np.asarray(K)
        if K.shape != (Y.shape[k], Y.shape[k]):
            raise ValueError(f"operator {k} has shape {K.shape}, expected {(Y.shape[k],) * 2}")
    factors = [np.hstack([U, K @ U]) for U, K in zip(Y.factors, operators)]
    core = np.zeros(tuple(2 * r for r in Y.rank))
    for k in range(Y.ndim):
        block = tuple(
            slice(r, 2 * r) if j == k else slice(0, r) for j, r in enumerate(Y.rank)
        )
        core[block] = Y.core
    return orthonormalize(core, factors)


def tucker_inner(Y1, Y2):
    """``<Y1, Y2>`` through the cores: ``<C1, C2 x_k U1_k^T U2_k>``."""
    if Y1.shape != Y2.shape:
        raise ValueError(f"shape mismatch: {Y1.shape} vs {Y2.shape}")
    M = [U.T @ V for U, V in zip(Y1.factors, Y2.factors)]
    return float(np.vdot(Y1.core, tn.multi_mode_product(Y2.core, M)))


def rank_one(vectors, scale=1.0):
    """``scale * v_1 o v_2 o ... o v_d`` as a rank-(1,...,1) Tucker tensor."""
    norms = [float(np.linalg.norm(v)) for v in vectors]
    factors = tuple(
        (np.asarray(v, dtype=np.float64) / nv if nv > 0 else np.eye(len(v), 1)[:, 0]).reshape(-1, 1)
        for v, nv in zip(vectors, norms)
    )
    core = np.full((1,) * len(vectors), scale * float(np.prod(norms)))
    return TuckerTensor(core, factors)
