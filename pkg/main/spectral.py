"""
Multi-task Regularization Networks - Spectral Layer
===================================================

Exact realization of the integral operator ``L_K`` on a finite input space
with a strictly positive probability weight per node. On such a space every
statement about ``L_K`` (Mercer expansion, fractional powers, the projection
onto retained modes, the data-free minimizer ``f_lambda``) is a finite
dimensional identity that can be checked to rounding error.

Functions are stored by node values, an ``(N, m)`` array. With
``W = diag(w) (x) I_m`` and ``G`` the full block Gram, ``L_K`` acts on the
flattened node values as ``G W``. It is diagonalized through the symmetric
matrix ``S = W^{1/2} G W^{1/2} = V diag(lambda) V^T`` whose eigenvectors give
the rho-orthonormal eigenfunctions ``phi_j = W^{-1/2} v_j``.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
import structlog

from main.exceptions import ArgumentError, NumericalError, RangeError
from main.kernels import MatrixKernel, as_points
from utils.linalg import block_vector, symmetric_eigh

logger = structlog.get_logger(__name__)

WEIGHT_SUM_TOL = 1e-12
CLAMP_TOL = 1e-10
RANK_TOL = 1e-12
SPAN_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class DiscreteSpace:
    """Finite input space with a non-degenerate probability measure."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = as_points(self.nodes).copy()
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if len(nodes) == 0:
            raise ArgumentError("a discrete space needs at least one node")
        if len(weights) != len(nodes):
            raise ArgumentError(f"{len(nodes)} nodes but {len(weights)} weights")
        if not np.all(np.isfinite(nodes)) or not np.all(np.isfinite(weights)):
            raise ArgumentError("nodes and weights must be finite")
        if np.any(weights <= 0):
            raise ArgumentError("every node weight must be strictly positive")
        if abs(float(np.sum(weights)) - 1.0) > WEIGHT_SUM_TOL:
            raise ArgumentError(f"weights sum to {np.sum(weights)!r}, expected 1")
        if len(np.unique(nodes, axis=0)) != len(nodes):
            raise ArgumentError("nodes must be distinct")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_lookup", {tuple(row.tolist()): idx for idx, row in enumerate(nodes)})

    @classmethod
    def uniform(cls, nodes) -> "DiscreteSpace":
        nodes = as_points(nodes)
        return cls(nodes, np.full(len(nodes), 1.0 / len(nodes)))

    @classmethod
    def uniform_grid(cls, start: float, stop: float, count: int) -> "DiscreteSpace":
        """Uniform-grid discretization of an interval with uniform weights."""
        if count < 1:
            raise ArgumentError(f"grid needs at least one node, got {count}")
        return cls.uniform(np.linspace(start, stop, count))

    @property
    def size(self) -> int:
        return len(self.nodes)

    def index_of(self, point) -> int:
        key = tuple(np.asarray(point, dtype=float).reshape(-1).tolist())
        if key not in self._lookup:
            raise ArgumentError(f"point {key} is not a node of the space")
        return self._lookup[key]

    def indices_of(self, points) -> np.ndarray:
        return np.array([self.index_of(point) for point in as_points(points)], dtype=int)

    def flat_weights(self, m: int) -> np.ndarray:
        """Weights repeated per task, matching the point-major layout."""
        return np.repeat(self.weights, m)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteSpace):
            return NotImplemented
        return (
            self is other
            or (
                self.nodes.shape == other.nodes.shape
                and np.array_equal(self.nodes, other.nodes)
                and np.array_equal(self.weights, other.weights)
            )
        )

    def __hash__(self) -> int:
        return hash((self.nodes.tobytes(), self.weights.tobytes()))


@dataclass(frozen=True, eq=False)
class RhoFunction:
    """Function on a discrete space stored as ``(N, m)`` node values."""

    space: DiscreteSpace
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(self.space.size, -1)
        if values.ndim != 2 or values.shape[0] != self.space.size:
            raise ArgumentError(f"expected node values of shape ({self.space.size}, m), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ArgumentError("node values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, space: DiscreteSpace, m: int) -> "RhoFunction":
        return cls(space, np.zeros((space.size, m)))

    @classmethod
    def from_vector(cls, space: DiscreteSpace, vector: np.ndarray, m: int) -> "RhoFunction":
        return cls(space, np.asarray(vector, dtype=float).reshape(space.size, m))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def vector(self) -> np.ndarray:
        return block_vector(self.values)

    def inner(self, other: "RhoFunction") -> float:
        """``<f, g>_rho = sum_i w_i f(z_i)^T g(z_i)``."""
        self._require_compatible(other)
        return float(np.sum(self.space.weights[:, None] * self.values * other.values))

    def norm(self) -> float:
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def sup_norm(self) -> float:
        """``max_i ||f(z_i)||_inf``."""
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def _require_compatible(self, other: "RhoFunction") -> None:
        if other.space != self.space or other.m != self.m:
            raise ArgumentError("functions live on different spaces or task counts")

    def __add__(self, other: "RhoFunction") -> "RhoFunction":
        self._require_compatible(other)
        return RhoFunction(self.space, self.values + other.values)

    def __sub__(self, other: "RhoFunction") -> "RhoFunction":
        self._require_compatible(other)
        return RhoFunction(self.space, self.values - other.values)

    def __mul__(self, scalar: float) -> "RhoFunction":
        return RhoFunction(self.space, self.values * float(scalar))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class SpectralDecomposition:
    """Eigenpairs of ``L_K`` on a discrete space.

    Attributes:
        space: The discrete space.
        m: Task count.
        eigenvalues: All ``Nm`` eigenvalues, descending, clamped at zero.
        eigenvectors: Orthonormal eigenvectors ``V`` of ``S``, one per column.
        gram: Full block Gram ``G`` over the space nodes.
        rank: Number of eigenvalues above ``1e-12 * lambda_1``.
    """

    space: DiscreteSpace
    m: int
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gram: np.ndarray
    rank: int

    @cached_property
    def sqrt_weights(self) -> np.ndarray:
        return np.sqrt(self.space.flat_weights(self.m))

    @cached_property
    def eigenfunction_matrix(self) -> np.ndarray:
        """``Phi = W^{-1/2} V``; column ``j`` holds the flattened node values of ``phi_j``."""
        return self.eigenvectors / self.sqrt_weights[:, None]

    @cached_property
    def diagonal_blocks(self) -> np.ndarray:
        """``K(z_k, z_k)`` for every node, shape ``(N, m, m)``."""
        size, m = self.space.size, self.m
        blocks = self.gram.reshape(size, m, size, m)
        nodes = np.arange(size)
        return blocks[nodes, :, nodes, :]

    @property
    def retained_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues[: self.rank]

    def eigenfunction(self, j: int) -> RhoFunction:
        return RhoFunction.from_vector(self.space, self.eigenfunction_matrix[:, j], self.m)

    def coefficients(self, f: RhoFunction) -> np.ndarray:
        """``<f, phi_j>_rho`` for every mode."""
        self._require_on_space(f)
        return self.eigenvectors.T @ (self.sqrt_weights * f.vector)

    def synthesize(self, coefficients: np.ndarray) -> RhoFunction:
        """``sum_j a_j phi_j`` over the leading ``len(coefficients)`` modes."""
        coefficients = np.asarray(coefficients, dtype=float)
        basis = self.eigenfunction_matrix[:, : len(coefficients)]
        return RhoFunction.from_vector(self.space, basis @ coefficients, self.m)

    def projection(self, f: RhoFunction) -> Tuple[RhoFunction, float]:
        """``P_Phi f`` and the rho-norm of the residual ``f - P_Phi f``."""
        projected = self.synthesize(self.coefficients(f)[: self.rank])
        return projected, (f - projected).norm()

    def kernel_coordinates(self, g: RhoFunction) -> np.ndarray:
        """K-orthonormal coordinates ``<g, phi_j>_rho / sqrt(lambda_j)`` over retained modes.

        Raises:
            RangeError: If ``g`` has a component outside the retained span.
        """
        _, residual = self.projection(g)
        if residual > SPAN_RESIDUAL_TOL * max(g.norm(), 1e-300):
            raise RangeError(f"function has a component of rho-norm {residual:.3e} outside the retained span")
        return self.coefficients(g)[: self.rank] / np.sqrt(self.retained_eigenvalues)

    def kernel_coordinates_from_coefficients(self, kernel_coefficients: np.ndarray) -> np.ndarray:
        """Coordinates of ``sum_k K(z_k, .) C_k`` from the flattened coefficients ``C``.

        Since ``G = W^{-1/2} V diag(lambda) V^T W^{-1/2}``, the coordinates are
        ``sqrt(lambda_j) v_j^T W^{-1/2} C``; no eigenvalue is inverted.
        """
        projected = self.eigenvectors[:, : self.rank].T @ (np.ravel(kernel_coefficients) / self.sqrt_weights)
        return np.sqrt(self.retained_eigenvalues) * projected

    def _require_on_space(self, f: RhoFunction) -> None:
        if f.space != self.space or f.m != self.m:
            raise ArgumentError("function is not defined on the decomposed space")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def apply_integral_operator(kernel: MatrixKernel, space: DiscreteSpace, f: RhoFunction) -> RhoFunction:
    """``(L_K f)(z_i) = sum_j w_j K(z_i, z_j) f(z_j)``."""
    if f.space != space or f.m != kernel.m:
        raise ArgumentError("function does not live on the given space with the kernel's task count")
    gram = kernel.block_gram(space.nodes, space.nodes)
    return RhoFunction.from_vector(space, gram @ (space.flat_weights(kernel.m) * f.vector), kernel.m)


def eigendecompose(kernel: MatrixKernel, space: DiscreteSpace) -> SpectralDecomposition:
    """Eigendecomposition of ``L_K`` through ``S = W^{1/2} G W^{1/2}``.

    Eigenvalues within ``-1e-10 * lambda_1`` of zero are clamped to zero; more
    negative ones mean the kernel is not positive semidefinite.
    """
    m = kernel.m
    gram = kernel.block_gram(space.nodes, space.nodes)
    if not np.all(np.isfinite(gram)):
        raise NumericalError("block Gram contains non-finite entries")
    sqrt_w = np.sqrt(space.flat_weights(m))
    values, vectors = symmetric_eigh(sqrt_w[:, None] * gram * sqrt_w[None, :])

    top = max(float(values[0]), 0.0)
    if values[-1] < -CLAMP_TOL * top:
        raise NumericalError(f"integral operator has eigenvalue {values[-1]:.3e}; kernel is not positive semidefinite")
    values = np.where(values < 0.0, 0.0, values)
    rank = int(np.sum(values > RANK_TOL * top)) if top > 0 else 0

    gram.setflags(write=False)
    values.setflags(write=False)
    vectors.setflags(write=False)
    logger.debug("eigendecomposed", nodes=space.size, m=m, rank=rank, top_eigenvalue=top)
    return SpectralDecomposition(space=space, m=m, eigenvalues=values, eigenvectors=vectors, gram=gram, rank=rank)


def mercer_reconstruct(dec: SpectralDecomposition, i: int, k: int, modes: Optional[int] = None) -> np.ndarray:
    """``sum_j lambda_j phi_j(z_i) phi_j(z_k)^T`` over the retained (or leading ``modes``) modes."""
    size = dec.space.size
    if not (0 <= i < size and 0 <= k < size):
        raise ArgumentError(f"node indices ({i}, {k}) outside 0..{size - 1}")
    count = dec.rank if modes is None else min(modes, dec.rank)
    phi = dec.eigenfunction_matrix[:, :count]
    m = dec.m
    phi_i = phi[i * m:(i + 1) * m]
    phi_k = phi[k * m:(k + 1) * m]
    return (phi_i * dec.eigenvalues[:count]) @ phi_k.T


def apply_fractional_power(dec: SpectralDecomposition, r: float, f: RhoFunction) -> RhoFunction:
    """``L_K^r f = sum_j lambda_j^r <f, phi_j>_rho phi_j`` over retained modes.

    ``r = 0`` returns ``P_Phi f``. Negative powers require ``f`` to lie in the
    retained span.
    """
    if not -1.0 <= r <= 1.0:
        raise ArgumentError(f"power must lie in [-1, 1], got {r}")
    coefficients = dec.coefficients(f)[: dec.rank]
    if r < 0:
        _, residual = dec.projection(f)
        if residual > SPAN_RESIDUAL_TOL * max(f.norm(), 1e-300):
            raise RangeError(f"negative power of L_K applied outside the retained span (residual {residual:.3e})")
    return dec.synthesize(dec.retained_eigenvalues ** r * coefficients)


def rkhs_norm_via_space(
    kernel: MatrixKernel,
    space: DiscreteSpace,
    g: RhoFunction,
    dec: Optional[SpectralDecomposition] = None,
) -> float:
    """``sqrt(g^T G^+ g)`` with the spectral pseudo-inverse over retained modes."""
    if dec is None:
        dec = eigendecompose(kernel, space)
    return float(np.linalg.norm(dec.kernel_coordinates(g)))


def compute_f_lambda(dec: SpectralDecomposition, f_rho: RhoFunction, lam: float) -> RhoFunction:
    """Data-free minimizer ``(L_K + lambda I)^{-1} L_K f_rho`` on the retained span."""
    if not np.isfinite(lam) or lam < 0:
        raise ArgumentError(f"lambda must be nonnegative, got {lam}")
    retained = dec.retained_eigenvalues
    filters = retained / (retained + lam)
    return dec.synthesize(filters * dec.coefficients(f_rho)[: dec.rank])


@dataclass(frozen=True)
class ApproximationError:
    """``||f_lambda - f_rho||_K`` with its bound ``lambda^{r - 1/2} nu``."""

    err_k: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.err_k <= self.bound + 1e-12


def approximation_error(
    dec: SpectralDecomposition,
    f_rho: RhoFunction,
    lam: float,
    r: float,
    source_norm: float,
    source_coefficients: Optional[Sequence[float]] = None,
) -> ApproximationError:
    """Closed-form approximation error for a source-condition target.

    The source coefficients ``d_j = <f_rho, phi_j>_rho / lambda_j^r`` are
    recovered from ``f_rho`` unless given explicitly.
    """
    if not 0.5 < r <= 1.0:
        raise ArgumentError(f"smoothness r must lie in (1/2, 1], got {r}")
    if not np.isfinite(lam) or lam < 0:
        raise ArgumentError(f"lambda must be nonnegative, got {lam}")
    retained = dec.retained_eigenvalues
    if source_coefficients is None:
        d = dec.coefficients(f_rho)[: dec.rank] / retained ** r
    else:
        d = np.zeros(dec.rank)
        given = np.asarray(source_coefficients, dtype=float)
        d[: len(given)] = given
    residual = lam / (retained + lam)
    err_k = float(np.sqrt(np.sum((residual * d) ** 2 * retained ** (2 * r - 1))))
    return ApproximationError(err_k=err_k, bound=float(lam ** (r - 0.5) * source_norm))
