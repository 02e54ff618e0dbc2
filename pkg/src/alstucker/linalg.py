"""Small dense factorizations used by the integrator.

The SVD is a one-sided Jacobi iteration applied to the triangular factor of
a thin QR decomposition.  Jacobi resolves tiny singular values to high
relative accuracy, which matters for cores whose unfoldings have singular
values spread over many orders of magnitude.
"""

from dataclasses import dataclass
import math

import numba
import numpy as np

GRAM_CONDITION_LIMIT = 1e14


class SingularGramError(np.linalg.LinAlgError):
    """Raised when ``C C^T`` is too ill-conditioned to invert."""


@dataclass(frozen=True)
class SvdResult:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    def reconstruct(self):
        return (self.left * self.singular_values) @ self.right.T


def _check_finite(M, what="matrix"):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D {what}, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{what} has non-finite entries")
    return M


@numba.njit(cache=True)
def _jacobi_sweeps(A, V, tol, max_sweeps):
    # Cyclic one-sided Jacobi, rotating column pairs of A (and V) in place.
    m, n = A.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    alpha += A[i, p] * A[i, p]
                    beta += A[i, q] * A[i, q]
                    gamma += A[i, p] * A[i, q]
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    ap = A[i, p]
                    aq = A[i, q]
                    A[i, p] = c * ap - s * aq
                    A[i, q] = s * ap + c * aq
                for i in range(n):
                    vp = V[i, p]
                    vq = V[i, q]
                    V[i, p] = c * vp - s * vq
                    V[i, q] = s * vp + c * vq
        if not rotated:
            return sweep + 1
    return -1


def _complete_orthonormal(W, filled):
    # Replace columns of W not marked in ``filled`` by unit vectors orthogonal
    # to everything else, trying canonical basis vectors in order.
    m = W.shape[0]
    basis = [W[:, j] for j in range(W.shape[1]) if filled[j]]
    candidates = iter(range(m))
    for j in np.flatnonzero(~filled):
        for i in candidates:
            v = np.zeros(m)
            v[i] = 1.0
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 0.5:
                W[:, j] = v / nv
                basis.append(W[:, j])
                break
    return W


def economy_svd(B, max_sweeps=60):
    """Thin SVD ``B = R diag(s) T^T`` of a tall matrix.

    Parameters
    ----------
    B : (m, r) array with m >= r
    max_sweeps : int
        Jacobi sweep budget; exceeding it raises ``LinAlgError``.

    Returns
    -------
    SvdResult
        ``left`` is m x r with orthonormal columns, ``singular_values`` are
        sorted nonincreasing, ``right`` is r x r orthogonal.  Each singular
        pair is signed so that the largest-magnitude entry of the left vector
        is positive (ties go to the lowest row index).  Left vectors belonging
        to exactly zero singular values are completed deterministically from
        canonical basis vectors.
    """
    B = _check_finite(B)
    m, r = B.shape
    if m < r:
        raise ValueError(f"economy_svd needs rows >= cols, got {B.shape}")
    Q, A = np.linalg.qr(B)
    A = np.array(A, order="C")
    V = np.eye(r)
    tol = r * np.finfo(np.float64).eps
    if _jacobi_sweeps(A, V, tol, max_sweeps) < 0:
        raise np.linalg.LinAlgError("one-sided Jacobi SVD did not converge")

    s = np.linalg.norm(A, axis=0)
    order = np.argsort(-s, kind="stable")
    s, A, V = s[order], A[:, order], V[:, order]

    filled = s > np.finfo(np.float64).tiny
    W = np.zeros_like(A)
    W[:, filled] = A[:, filled] / s[filled]
    s[~filled] = 0.0
    if not filled.all():
        W = _complete_orthonormal(W, filled)

    left = Q @ W
    idx = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[idx, np.arange(r)] < 0, -1.0, 1.0)
    return SvdResult(left * signs, s, V * signs)


def orthonormal_polar_factor(B):
    """Orthonormal factor ``R T^T`` of the thin SVD of ``B``.

    This is a maximizer of ``Tr[B^T V]`` over all ``V`` with orthonormal
    columns, and the unique one when ``B`` has full column rank.
    """
    svd = economy_svd(B)
    return svd.left @ svd.right.T


def pseudo_inverse_gram(C, condition_limit=GRAM_CONDITION_LIMIT):
    """``C^T (C C^T)^{-1}`` for a matrix of full row rank.

    Raises ``SingularGramError`` when the condition number of ``C C^T``
    exceeds ``condition_limit``.
    """
    C = _check_finite(C)
    G = C @ C.T
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > condition_limit:
        raise SingularGramError(f"C C^T is numerically singular (condition {cond:.3e})")
    return np.linalg.solve(G, C).T


def matrix_exponential(W):
    """``exp(W)`` by scaling and squaring of a truncated Taylor series.

    The argument is scaled by ``2**-s`` until its 1-norm is at most 1/2; the
    series is summed until the next term drops below machine precision
    relative to the partial sum (at most 30 terms).
    """
    W = _check_finite(W)
    n, m = W.shape
    if n != m:
        raise ValueError(f"matrix_exponential needs a square matrix, got {W.shape}")
    nrm = np.linalg.norm(W, 1)
    s = max(0, int(np.ceil(np.log2(nrm / 0.5)))) if nrm > 0 else 0
    X = W / 2.0**s
    E = np.eye(n)
    term = np.eye(n)
    eps = np.finfo(np.float64).eps
    for k in range(1, 31):
        term = term @ X / k
        E = E + term
        if np.linalg.norm(term, 1) <= eps * np.linalg.norm(E, 1):
            break
    for _ in range(s):
        E = E @ E
    return E


def qr_positive(M):
    """Thin QR with the diagonal of ``R`` made nonnegative (deterministic signs)."""
    Q, R = np.linalg.qr(np.asarray(M, dtype=np.float64))
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * signs, R * signs[:, None]


def qr_orthonormalize(M):
    """Orthonormal basis of ``range(M)``; ``M`` must have full column rank."""
    M = _check_finite(M)
    if M.shape[0] < M.shape[1]:
        raise ValueError(f"qr_orthonormalize needs rows >= cols, got {M.shape}")
    Q, R = qr_positive(M)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= max(M.shape) * np.finfo(np.float64).eps * d.max():
        raise np.linalg.LinAlgError("matrix is numerically rank deficient")
    return Q


def orthonormal_complement(U, k):
    """``k`` orthonormal columns orthogonal to the orthonormal columns of ``U``."""
    m, r = U.shape
    if r + k > m:
        raise ValueError(f"cannot add {k} columns to a {m} x {r} orthonormal matrix")
    Q, _ = np.linalg.qr(U, mode="complete")
    return Q[:, r:r + k]
