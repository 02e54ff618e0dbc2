"""Gauge-free Euler steps for dynamical Tucker approximation.

One step fits a tangent vector

    dY = dC x_k U_k + sum_k C x_k dU_k x_{l != k} U_l

to a derivative ``Adot`` by alternating least squares.  The factor blocks
are not gauged (``U_k^T dU_k`` may be nonzero).  Constraining the updated
factor ``U_k + h dU_k`` to have orthonormal columns turns every factor
subproblem into ``max Tr[B_n^T V]`` over orthonormal ``V``, solved by the
orthonormal polar factor of ``B_n``.  Nothing in this path inverts a core
unfolding Gram matrix; :func:`gauged_reference_step` is the classical
scheme that does, kept for comparison.
"""

from dataclasses import dataclass, field
from typing import Protocol, Union

import numpy as np

from . import tensor as tn
from .linalg import orthonormal_polar_factor, pseudo_inverse_gram
from .tucker import TuckerTensor, orthonormalize, tucker_sum

Derivative = Union[np.ndarray, TuckerTensor]

_EPS = np.finfo(np.float64).eps
# Densify Tucker derivatives for the defect evaluation below this many entries.
_DENSE_DEFECT_LIMIT = 2_000_000


class RhsProvider(Protocol):
    def derivative_at(self, t: float, Y: TuckerTensor) -> Derivative:
        """Return ``Adot(t)`` (data problems) or ``F(t, Y)`` (tensor ODEs)."""
        ...


class StepFailure(FloatingPointError):
    """A step produced a non-finite defect or iterate."""


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings of the ALS Euler step and the schemes composed from it.

    ``regularization`` is ``None`` (off), the string ``"h2"`` for
    ``alpha = h**2`` with ``h`` the length of the Euler step being taken, or a
    fixed nonnegative ``alpha``.
    """

    step_size: float
    fit_tolerance: float = 1e-5
    max_sweeps: int = 10
    regularization: Union[None, str, float] = None
    scheme: str = "euler"
    warm_start: bool = False
    defect_method: str = "auto"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if self.fit_tolerance < 0:
            raise ValueError("fit_tolerance must be nonnegative")
        if self.scheme not in ("euler", "improved_euler", "gauged_reference"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.defect_method not in ("auto", "dense", "gram", "structured"):
            raise ValueError(f"unknown defect method {self.defect_method!r}")
        reg = self.regularization
        if isinstance(reg, str):
            if reg != "h2":
                raise ValueError(f"unknown regularization rule {reg!r}")
        elif reg is not None and not reg >= 0:
            raise ValueError("regularization alpha must be nonnegative")

    def alpha(self, h):
        if self.regularization is None:
            return 0.0
        if self.regularization == "h2":
            return h * h
        return float(self.regularization)


@dataclass
class StepReport:
    sweeps: int
    relative_defect: float
    defect_history: list = field(default_factory=list)
    initial_relative_defect: float = float("nan")
    alpha: float = 0.0
    derivative_norm: float = 0.0
    factor_increments: list = field(default_factory=list, repr=False)


class StepContext:
    """Contractions of the derivative with the frozen factors of one step.

    ``projected_core`` is ``Adot x_k U_k^T`` and ``partial[n]`` is the
    unfolding ``[Adot x_{k != n} U_k^T]_(n)`` of shape ``(I_n, prod r_k)``.
    Both only depend on ``Y`` and ``Adot`` and are computed once per step;
    Tucker derivatives are contracted without densifying.
    """

    def __init__(self, Y, derivative):
        self.Y = Y
        self.derivative = derivative
        U = Y.factors
        if isinstance(derivative, TuckerTensor):
            if derivative.shape != Y.shape:
                raise ValueError(f"derivative shape {derivative.shape} does not match {Y.shape}")
            M = [Uk.T @ Vk for Uk, Vk in zip(U, derivative.factors)]
            self.projected_core = tn.multi_mode_product(derivative.core, M)
            self.partial = []
            for n in range(Y.ndim):
                Z = tn.multi_mode_product(derivative.core, M, skip=n)
                self.partial.append(derivative.factors[n] @ tn.unfold(Z, n))
            self.derivative_norm = derivative.norm()
        else:
            A = tn.as_tensor(derivative)
            if A.shape != Y.shape:
                raise ValueError(f"derivative shape {A.shape} does not match {Y.shape}")
            self.derivative = A
            self.partial = []
            for n in range(Y.ndim):
                Z = tn.multi_mode_product(A, U, skip=n, transpose=True)
                self.partial.append(tn.unfold(Z, n))
            last = Y.ndim - 1
            self.projected_core = tn.fold(U[last].T @ self.partial[last], last, Y.rank)
            self.derivative_norm = tn.norm(A)
        if not np.isfinite(self.derivative_norm):
            raise StepFailure("derivative has non-finite entries")
        self.core_unfoldings = [tn.unfold(Y.core, n) for n in range(Y.ndim)]


def _gauge_terms(Y, delta_factors):
    # C x_k (U_k^T dU_k) for every mode k
    return [
        tn.mode_product(Y.core, k, U.T @ dU)
        for k, (U, dU) in enumerate(zip(Y.factors, delta_factors))
    ]


def core_delta(ctx, delta_factors):
    """Optimal core increment ``Adot x_k U_k^T - sum_k C x_k U_k^T dU_k``.

    For fixed factor increments this minimizes the defect over the core
    increment; with all ``dU_k = 0`` it is the gauged core derivative.
    """
    return ctx.projected_core - sum(_gauge_terms(ctx.Y, delta_factors))


def assemble_Bn(n, ctx, delta_core, delta_factors, h, alpha=0.0):
    """Matrix ``B_n`` of the trace problem for the mode-``n`` factor update.

    ``B_n = ([Adot x_{k!=n} U_k^T]_(n) - U_n dC_(n)
             - U_n sum_{k!=n} [C x_k U_k^T dU_k]_(n)) C_(n)^T
            + (1/h) U_n C_(n) C_(n)^T + (alpha/h) U_n``
    """
    Y = ctx.Y
    U = Y.factors[n]
    Cn = ctx.core_unfoldings[n]
    inner = tn.unfold(delta_core, n)
    for k, (Uk, dUk) in enumerate(zip(Y.factors, delta_factors)):
        if k != n:
            inner = inner + tn.unfold(tn.mode_product(Y.core, k, Uk.T @ dUk), n)
    B = (ctx.partial[n] - U @ inner) @ Cn.T + (U @ (Cn @ Cn.T)) / h
    if alpha > 0:
        B = B + (alpha / h) * U
    return B


def factor_update(B):
    """Updated factor: the maximizer ``R_n T_n^T`` of ``Tr[B_n^T V]``."""
    return orthonormal_polar_factor(B)


def tangent_dense(Y, delta_core, delta_factors):
    """Dense tangent tensor ``dC x_k U_k + sum_k C x_k dU_k x_{l!=k} U_l``."""
    T = tn.multi_mode_product(delta_core, Y.factors)
    for k, dU in enumerate(delta_factors):
        factors = list(Y.factors)
        factors[k] = dU
        T = T + tn.multi_mode_product(Y.core, factors)
    return T


def tangent_tucker(Y, delta_core, delta_factors):
    """The tangent tensor in Tucker form with factors ``[U_k, dU_k]``."""
    r = Y.rank
    core = np.zeros(tuple(2 * rk for rk in r))
    core[tuple(slice(0, rk) for rk in r)] = delta_core
    for k in range(Y.ndim):
        block = tuple(slice(rj, 2 * rj) if j == k else slice(0, rj) for j, rj in enumerate(r))
        core[block] = Y.core
    factors = [np.hstack([U, dU]) for U, dU in zip(Y.factors, delta_factors)]
    return orthonormalize(core, factors)


def _defect_gram(ctx, delta_core, delta_factors):
    Y = ctx.Y
    gauge = _gauge_terms(Y, delta_factors)
    S = sum(gauge)
    val = ctx.derivative_norm**2 + tn.norm(delta_core) ** 2
    val -= 2.0 * tn.inner(ctx.projected_core, delta_core)
    for k, dU in enumerate(delta_factors):
        dUC = dU @ ctx.core_unfoldings[k]
        val += float(np.vdot(dUC, dUC)) - 2.0 * float(np.vdot(ctx.partial[k], dUC))
    val += 2.0 * tn.inner(delta_core, S)
    val += tn.norm(S) ** 2 - sum(tn.norm(G) ** 2 for G in gauge)
    return float(np.sqrt(max(val, 0.0)))


def _dense_derivative(ctx):
    A = ctx.derivative
    return A.to_full() if isinstance(A, TuckerTensor) else A


def fit_norm(ctx, delta_core, delta_factors, method="auto"):
    """Defect ``||dY - Adot||`` of a tangent increment.

    ``method`` is ``"dense"`` (builds the full tangent tensor),
    ``"gram"`` (expanded inner products of small matrices),
    ``"structured"`` (orthonormalized Tucker difference, never dense) or
    ``"auto"``: dense unless the derivative is a Tucker tensor too large to
    densify, in which case the structured form is used.
    """
    if method == "auto":
        dense_ok = not isinstance(ctx.derivative, TuckerTensor) or np.prod(ctx.Y.shape) <= _DENSE_DEFECT_LIMIT
        method = "dense" if dense_ok else "structured"
    if method == "dense":
        return tn.norm(tangent_dense(ctx.Y, delta_core, delta_factors) - _dense_derivative(ctx))
    if method == "gram":
        return _defect_gram(ctx, delta_core, delta_factors)
    if method == "structured":
        T = tangent_tucker(ctx.Y, delta_core, delta_factors)
        A = ctx.derivative
        if not isinstance(A, TuckerTensor):
            return tn.norm(T.to_full() - A)
        return tucker_sum([T, A], [1.0, -1.0]).norm()
    raise ValueError(f"unknown defect method {method!r}")


def als_euler_step(Y, t, rhs, cfg, h=None, derivative=None, initial_factor_increments=None):
    """One explicit Euler step ``t -> t + h`` by alternating least squares.

    Parameters
    ----------
    Y : TuckerTensor
        Current iterate with orthonormal factors.
    t : float
    rhs : RhsProvider
        Queried once at ``(t, Y)`` unless ``derivative`` is given.
    cfg : IntegratorConfig
    h : float, optional
        Step length, defaults to ``cfg.step_size``.
    derivative : ndarray or TuckerTensor, optional
        Precomputed derivative to fit instead of ``rhs.derivative_at(t, Y)``.
    initial_factor_increments : list of ndarray, optional
        Starting ``dU_k``; zero when omitted.

    Returns
    -------
    (TuckerTensor, StepReport)
        ``(C + h dC) x_k U_k^h`` and the sweep diagnostics.
    """
    h = cfg.step_size if h is None else h
    if derivative is None:
        derivative = rhs.derivative_at(t, Y)
    ctx = StepContext(Y, derivative)
    alpha = cfg.alpha(h)
    scale = ctx.derivative_norm if ctx.derivative_norm > 0 else 1.0

    if initial_factor_increments is None:
        dU = [np.zeros_like(U) for U in Y.factors]
    else:
        dU = [np.array(D, dtype=np.float64) for D in initial_factor_increments]
    dC = core_delta(ctx, dU)
    previous = fit_norm(ctx, dC, dU, cfg.defect_method) / scale
    report = StepReport(0, previous, [], previous, alpha, ctx.derivative_norm)

    new_factors = [U + h * D for U, D in zip(Y.factors, dU)]
    for sweep in range(1, cfg.max_sweeps + 1):
        for n in range(Y.ndim):
            B = assemble_Bn(n, ctx, dC, dU, h, alpha)
            new_factors[n] = factor_update(B)
            dU[n] = (new_factors[n] - Y.factors[n]) / h
        dC = core_delta(ctx, dU)
        current = fit_norm(ctx, dC, dU, cfg.defect_method) / scale
        if not np.isfinite(current):
            raise StepFailure(f"non-finite defect in sweep {sweep} of the step at t={t}")
        report.sweeps = sweep
        report.defect_history.append(current)
        report.relative_defect = current
        change = abs(current - previous) / max(previous, _EPS)
        previous = current
        if change < cfg.fit_tolerance:
            break

    report.factor_increments = dU
    return TuckerTensor(Y.core + h * dC, tuple(new_factors)), report


def improved_euler_step(Y, t, rhs, cfg, h=None, initial_factor_increments=None):
    """Two-stage explicit Runge-Kutta step built from ALS Euler steps.

    ``Y_half`` comes from an Euler step of length ``h/2``; the derivative is
    re-evaluated at ``(t + h/2, Y_half)`` and a full Euler step of length
    ``h`` from ``Y`` fits that derivative.
    """
    h = cfg.step_size if h is None else h
    half, _ = als_euler_step(Y, t, rhs, cfg, h=h / 2, initial_factor_increments=initial_factor_increments)
    derivative = rhs.derivative_at(t + h / 2, half)
    return als_euler_step(
        Y, t, rhs, cfg, h=h, derivative=derivative, initial_factor_increments=initial_factor_increments
    )


def _gauged_increments(ctx):
    dU = []
    for n, U in enumerate(ctx.Y.factors):
        G = ctx.partial[n]
        dU.append((G - U @ (U.T @ G)) @ pseudo_inverse_gram(ctx.core_unfoldings[n]))
    return ctx.projected_core, dU


def gauged_reference_step(Y, t, rhs, h, derivative=None, return_report=False):
    """Explicit Euler step of the gauged factor/core equations.

    ``dC = Adot x_k U_k^T`` and
    ``dU_n = (I - U_n U_n^T) [Adot x_{k!=n} U_k^T]_(n) C_(n)^T (C_(n) C_(n)^T)^{-1}``.
    Factors are re-orthonormalized by QR after the step.  Raises
    :class:`~alstucker.linalg.SingularGramError` when a core unfolding Gram
    matrix is numerically singular.
    """
    if derivative is None:
        derivative = rhs.derivative_at(t, Y)
    ctx = StepContext(Y, derivative)
    dC, dU = _gauged_increments(ctx)
    Y_new = orthonormalize(Y.core + h * dC, [U + h * D for U, D in zip(Y.factors, dU)])
    if not all(np.all(np.isfinite(F)) for F in (Y_new.core, *Y_new.factors)):
        raise StepFailure(f"non-finite iterate in the gauged step at t={t}")
    if not return_report:
        return Y_new
    scale = ctx.derivative_norm if ctx.derivative_norm > 0 else 1.0
    rel = fit_norm(ctx, dC, dU) / scale
    return Y_new, StepReport(0, rel, [], rel, 0.0, ctx.derivative_norm)


def step(Y, t, rhs, cfg, previous=None):
    """Advance by ``cfg.step_size`` with the scheme named in ``cfg``.

    Returns ``(Y_new, report)``.  The gauged reference scheme performs no
    sweeps; its report carries the defect of the gauged increments.  With
    ``cfg.warm_start`` the ALS sweeps start from the factor increments of
    ``previous`` (the report of the preceding step) instead of zero.
    """
    warm = None
    if cfg.warm_start and previous is not None and previous.factor_increments:
        warm = previous.factor_increments
    if cfg.scheme == "euler":
        return als_euler_step(Y, t, rhs, cfg, initial_factor_increments=warm)
    if cfg.scheme == "improved_euler":
        return improved_euler_step(Y, t, rhs, cfg, initial_factor_increments=warm)
    return gauged_reference_step(Y, t, rhs, cfg.step_size, return_report=True)
