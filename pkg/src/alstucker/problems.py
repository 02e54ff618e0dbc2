"""Test problems: time-dependent data tensors and spatially discretized PDEs.

Every problem exposes ``shape``, ``derivative_at(t, Y)`` (so it can be fed
to the integrator directly), ``initial(rank)`` and, where feasible,
``reference(t)``.  All randomness comes from one seed.
"""

import math
from functools import lru_cache

import numpy as np

from . import tensor as tn
from .linalg import matrix_exponential, qr_orthonormalize
from .tucker import (
    TuckerTensor,
    apply_kron_sum_operator,
    hooi,
    pad_rank,
    rank_one,
    recompress,
    tucker_hadamard,
    tucker_sum,
)

# Dense reference solutions beyond this many grid values are refused.
DENSE_REFERENCE_LIMIT = 4_000_000


class InfeasibleReference(RuntimeError):
    """The requested reference solution is too large to compute densely."""


def _as_rank(rank, d):
    return (int(rank),) * d if np.isscalar(rank) else tuple(int(r) for r in rank)


class KochLubichProblem:
    """``A(t) = e^t B x_k U_k + eps (1 + t + sin 3t) P``.

    ``U_k`` are random orthonormal ``I x r_k`` matrices, ``B`` a Gaussian
    core of shape ``inner_rank`` and ``P`` a Gaussian perturbation of full
    size.  With ``form="data"`` the derivative is ``Adot(t)`` in closed form;
    with ``form="ode"`` it is the right-hand side
    ``F(t, Y) = Y + eps (3 cos 3t - sin 3t - t) P`` of the equivalent ODE.
    """

    kind = "koch_lubich"

    def __init__(self, dim=4, size=15, inner_rank=10, eps=1e-3, seed=0, form="data"):
        if form not in ("data", "ode"):
            raise ValueError(f"unknown derivative form {form!r}")
        self.dim, self.size, self.eps, self.form = dim, size, eps, form
        self.shape = (size,) * dim
        self.inner_rank = _as_rank(inner_rank, dim)
        if any(not 1 <= r <= size for r in self.inner_rank):
            raise ValueError(f"inner rank {self.inner_rank} not admissible for mode size {size}")
        rng = np.random.default_rng(seed)
        self.factors = tuple(qr_orthonormalize(rng.standard_normal((size, r))) for r in self.inner_rank)
        self.core = rng.standard_normal(self.inner_rank)
        self.perturbation = rng.standard_normal(self.shape)
        self.low_rank_part = tn.multi_mode_product(self.core, self.factors)

    def data(self, t):
        return math.exp(t) * self.low_rank_part + self.eps * (1 + t + math.sin(3 * t)) * self.perturbation

    def data_derivative(self, t):
        return math.exp(t) * self.low_rank_part + self.eps * (1 + 3 * math.cos(3 * t)) * self.perturbation

    def ode_rhs(self, t, Y):
        Yf = Y.to_full() if isinstance(Y, TuckerTensor) else Y
        return Yf + self.eps * (3 * math.cos(3 * t) - math.sin(3 * t) - t) * self.perturbation

    def derivative_at(self, t, Y):
        return self.data_derivative(t) if self.form == "data" else self.ode_rhs(t, Y)

    def initial(self, rank):
        return hooi(self.data(0.0), _as_rank(rank, self.dim))

    def reference(self, t):
        return self.data(t)


class RotatingDecayProblem:
    """``A(t) = e^t C x_k exp(t W_k)`` with a super-diagonal core.

    The core has diagonal entries ``c_j = 2^{-(d-1) j}``, ``j = 1..I``, and
    ``W_k = (G_k - G_k^T)/2`` for Gaussian ``G_k``, so every mode-``k``
    unfolding of ``A(t)`` has singular values ``e^t c_j``.
    """

    kind = "rotating_decay"

    def __init__(self, dim=2, size=50, seed=0):
        self.dim, self.size = dim, size
        self.shape = (size,) * dim
        rng = np.random.default_rng(seed)
        self.generators = []
        for _ in range(dim):
            G = rng.standard_normal((size, size))
            self.generators.append((G - G.T) / 2)
        j = np.arange(1, size + 1)
        self.diagonal = 2.0 ** (-(dim - 1) * j)
        core = np.zeros(self.shape)
        core[(j - 1,) * dim] = self.diagonal
        self.core = core
        self._rotations = lru_cache(maxsize=8)(self._compute_rotations)

    def _compute_rotations(self, t):
        return tuple(matrix_exponential(t * W) for W in self.generators)

    def data(self, t):
        return math.exp(t) * tn.multi_mode_product(self.core, self._rotations(float(t)))

    def data_derivative(self, t):
        A = self.data(t)
        out = A.copy()
        for k, W in enumerate(self.generators):
            out += tn.mode_product(A, k, W)
        return out

    def derivative_at(self, t, Y):
        return self.data_derivative(t)

    def initial(self, rank):
        return hooi(self.data(0.0), _as_rank(rank, self.dim))

    def reference(self, t):
        return self.data(t)

    def singular_values(self, t):
        return math.exp(t) * self.diagonal

    def model_accuracy(self, t, rank):
        """Tail sum ``sum_{j > r} sigma_j(t) / ||A(t)||`` for a uniform rank ``r``."""
        s = self.singular_values(t)
        return float(s[rank:].sum() / np.linalg.norm(s))


def laplacian_1d(size):
    """``(1/k^2) tridiag(1, -2, 1)`` with ``k = 1/size`` (homogeneous Dirichlet)."""
    k = 1.0 / size
    return (np.diag(-2.0 * np.ones(size)) + np.diag(np.ones(size - 1), 1) + np.diag(np.ones(size - 1), -1)) / k**2


def grid(size):
    """Cell-centred nodes ``(i - 1/2) k``, ``i = 1..size``, of the unit interval."""
    return (np.arange(1, size + 1) - 0.5) / size


def sine_modes(size, count):
    """Discrete Dirichlet eigenvectors ``sin(j pi i / (size + 1))``, ``j = 1..count``, as columns."""
    i = np.arange(1, size + 1)[:, None]
    j = np.arange(1, count + 1)[None, :]
    return np.sin(np.pi * i * j / (size + 1))


class _DenseRK4:
    """Classical RK4 on the full grid, advanced incrementally between queries."""

    def __init__(self, rhs, u0, max_step):
        self.rhs, self.u0, self.max_step = rhs, u0, max_step
        self.t, self.u = 0.0, u0.copy()

    def solve(self, t):
        if t < self.t:
            self.t, self.u = 0.0, self.u0.copy()
        span = t - self.t
        n = int(math.ceil(span / self.max_step - 1e-9)) if span > 0 else 0
        if n:
            h = span / n
            u = self.u
            for i in range(n):
                s = self.t + i * h
                k1 = self.rhs(s, u)
                k2 = self.rhs(s + h / 2, u + h / 2 * k1)
                k3 = self.rhs(s + h / 2, u + h / 2 * k2)
                k4 = self.rhs(s + h, u + h * k3)
                u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            self.t, self.u = t, u
        return self.u.copy()


class _GridProblem:
    reference_step = 1e-4

    def _setup_grid(self, dim, size, diffusivity):
        self.dim, self.size, self.diffusivity = dim, size, diffusivity
        self.shape = (size,) * dim
        self.x = grid(size)
        self.operator = laplacian_1d(size)
        self._reference = None

    def laplacian_dense(self, U):
        out = np.zeros_like(U)
        for k in range(self.dim):
            out += tn.mode_product(U, k, self.operator)
        return out

    def laplacian_tucker(self, Y):
        return apply_kron_sum_operator([self.diffusivity * self.operator] * self.dim, Y)

    def initial(self, rank):
        """Rank-one initial value embedded into ``rank``.

        The extra factor columns are low-frequency sine modes orthogonalized
        against the data, so the right-hand side has components along them.
        """
        rank = _as_rank(rank, self.dim)
        modes = sine_modes(self.size, max(rank) + 1)
        return pad_rank(self.initial_rank_one(), rank, bases=[modes] * self.dim)

    def reference(self, t):
        """Dense RK4 solution of the full semi-discrete system at time ``t``."""
        if int(np.prod(self.shape)) > DENSE_REFERENCE_LIMIT:
            raise InfeasibleReference(f"dense reference for shape {self.shape} is out of scope")
        if self._reference is None:
            self._reference = _DenseRK4(self.dense_rhs, self.initial_rank_one().to_full(), self.reference_step)
        return self._reference.solve(t)


class HeatSourceProblem(_GridProblem):
    """2-d heat equation ``u_t = 0.01 lap u + x1 x2 exp(-t (x1 + x2))``.

    Homogeneous Dirichlet data, Gaussian initial value
    ``exp(-100 ((x1 - 0.5)^2 + (x2 - 0.5)^2))``.  The Laplacian is the
    Kronecker sum of second-order central differences and the source is an
    exact rank-one Tucker tensor at every ``t``.
    """

    kind = "heat"

    def __init__(self, size=64, diffusivity=0.01):
        self._setup_grid(2, size, diffusivity)

    def initial_rank_one(self):
        g = np.exp(-100 * (self.x - 0.5) ** 2)
        return rank_one([g, g])

    def source(self, t):
        f = self.x * np.exp(-t * self.x)
        return rank_one([f, f])

    def dense_rhs(self, t, U):
        return self.diffusivity * self.laplacian_dense(U) + self.source(t).to_full()

    def derivative_at(self, t, Y):
        return tucker_sum([self.laplacian_tucker(Y), self.source(t)])

    def stability_limit(self):
        """Largest stable explicit Euler step for the diffusion part."""
        return 2.0 / (self.diffusivity * self.dim * 4.0 * self.size**2)


class ReactionDiffusionProblem(_GridProblem):
    """``u_t = 0.01 lap u + 0.1 u^3`` on ``(0,1)^d`` with Dirichlet data.

    The initial value ``10 d prod_n exp(-100 (x_n - 0.5)^2)`` is rank one.
    The cubic term is formed by two Hadamard products and recompressed by
    HOOI to ``recompression_rank`` (the manifold rank of the run).
    """

    kind = "reaction_diffusion"

    def __init__(self, dim=2, size=100, recompression_rank=3, diffusivity=0.01, reaction=0.1):
        if dim < 2:
            raise ValueError("dimension must be at least 2")
        self._setup_grid(dim, size, diffusivity)
        self.reaction = reaction
        self.recompression_rank = _as_rank(recompression_rank, dim)

    def initial_rank_one(self):
        g = np.exp(-100 * (self.x - 0.5) ** 2)
        return rank_one([g] * self.dim, scale=10.0 * self.dim)

    def dense_rhs(self, t, U):
        return self.diffusivity * self.laplacian_dense(U) + self.reaction * U**3

    def cubic_term(self, Y):
        cube = tucker_hadamard(tucker_hadamard(Y, Y), Y)
        return recompress(cube, self.recompression_rank)

    def derivative_at(self, t, Y):
        return tucker_sum([self.laplacian_tucker(Y), self.cubic_term(Y)], [1.0, self.reaction])


class ConstantProblem:
    """Time-independent data ``A(t) = A0`` of exact Tucker rank: zero derivative."""

    kind = "constant"

    def __init__(self, dim=3, size=8, inner_rank=3, seed=0):
        rng = np.random.default_rng(seed)
        self.dim, self.size = dim, size
        self.shape = (size,) * dim
        r = _as_rank(inner_rank, dim)
        factors = [qr_orthonormalize(rng.standard_normal((size, k))) for k in r]
        self.value = tn.multi_mode_product(rng.standard_normal(r), factors)

    def derivative_at(self, t, Y):
        return np.zeros(self.shape)

    def initial(self, rank):
        return hooi(self.value, _as_rank(rank, self.dim))

    def reference(self, t):
        return self.value


PROBLEMS = {
    "koch_lubich": KochLubichProblem,
    "rotating_decay": RotatingDecayProblem,
    "heat": HeatSourceProblem,
    "reaction_diffusion": ReactionDiffusionProblem,
    "constant": ConstantProblem,
}


def build_problem(kind, rank, dim=None, size=None, eps=None, seed=0, **extra):
    """Instantiate a problem and its rank-``rank`` initial state.

    Data problems start from the HOOI approximation of ``A(0)``; PDE problems
    start from their rank-one initial value embedded into the manifold rank.

    Returns
    -------
    (problem, TuckerTensor)
    """
    if kind not in PROBLEMS:
        raise ValueError(f"unknown experiment {kind!r}; choose from {sorted(PROBLEMS)}")
    kwargs = dict(extra)
    if size is not None:
        kwargs["size"] = size
    if kind == "koch_lubich":
        kwargs.setdefault("dim", 4 if dim is None else dim)
        kwargs.setdefault("inner_rank", rank)
        if eps is not None:
            kwargs["eps"] = eps
        kwargs["seed"] = seed
    elif kind in ("rotating_decay", "constant"):
        if dim is not None:
            kwargs["dim"] = dim
        kwargs["seed"] = seed
    elif kind == "heat":
        if dim not in (None, 2):
            raise ValueError("the heat problem is two-dimensional")
    elif kind == "reaction_diffusion":
        if dim is not None:
            kwargs["dim"] = dim
        kwargs.setdefault("recompression_rank", rank)
    problem = PROBLEMS[kind](**kwargs)
    rank = _as_rank(rank, len(problem.shape))
    if any(not 1 <= r <= n for r, n in zip(rank, problem.shape)):
        raise ValueError(f"rank {rank} not admissible for shape {problem.shape}")
    return problem, problem.initial(rank)


def relative_error(Y, reference):
    """``||reference - Y|| / ||reference||`` for a dense or Tucker reference.

    Tucker references are compared structurally through :func:`tucker_sum`.
    """
    if isinstance(reference, TuckerTensor):
        diff = tucker_sum([reference, Y], [1.0, -1.0]).norm()
        ref = reference.norm()
    else:
        reference = tn.as_tensor(reference)
        if reference.shape != Y.shape:
            raise ValueError(f"shape mismatch: {Y.shape} vs {reference.shape}")
        diff = tn.norm(reference - Y.to_full())
        ref = tn.norm(reference)
    return diff / ref if ref > 0 else diff


def error_metrics(Y, reference=None, report=None):
    """Relative error against ``reference`` and relative defect from a step report.

    Missing inputs give ``None`` for the corresponding metric.
    """
    return {
        "relative_error": None if reference is None else relative_error(Y, reference),
        "relative_defect": None if report is None else report.relative_defect,
    }
