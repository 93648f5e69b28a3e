"""
Multi-task Regularization Networks - Matrix-valued Kernels
==========================================================

Scalar base kernels, coupling matrices and the matrix-valued reproducing
kernels built from them. A matrix-valued kernel ``K`` maps a pair of input
points to an ``m x m`` matrix with ``K(x, x') = K(x', x)^T`` and nonnegative
block quadratic forms.

Evaluation convention: the section ``K(x, .) xi`` evaluated at ``x'`` is
``K(x', x) xi``, so a model with anchors ``x_i`` and coefficients ``c_i`` is
evaluated as ``f(x) = sum_i K(x, x_i) c_i``.

Block Gram matrices are laid out point-major: row ``i * m + p`` holds task
``p`` of point ``i``.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple

import numpy as np
import structlog

from main.exceptions import ArgumentError, KernelDomainError
from utils.linalg import min_eigenvalue

if TYPE_CHECKING:
    from main.spectral import DiscreteSpace

logger = structlog.get_logger(__name__)

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10


def as_points(points) -> np.ndarray:
    """Coerce a point or a list of points to a 2-D ``(count, dim)`` float array.

    A 1-D input is read as a list of scalar coordinates.
    """
    array = np.asarray(points, dtype=float)
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        return array.reshape(-1, 1)
    if array.ndim != 2:
        raise ArgumentError(f"points must be at most 2-D, got shape {array.shape}")
    return array


def as_point(point) -> np.ndarray:
    """Coerce a single point to a ``(1, dim)`` array."""
    array = np.asarray(point, dtype=float)
    if array.ndim == 0:
        return array.reshape(1, 1)
    return array.reshape(1, -1)


class _NodeIndex:
    """Exact coordinate-to-index lookup for a finite node set."""

    def __init__(self, nodes: np.ndarray):
        self.nodes = as_points(nodes)
        self._index: Dict[Tuple[float, ...], int] = {}
        for idx, row in enumerate(self.nodes):
            key = tuple(row.tolist())
            if key in self._index:
                raise ArgumentError(f"duplicate node {key} in lookup kernel")
            self._index[key] = idx

    def locate(self, points: np.ndarray) -> np.ndarray:
        indices = np.empty(len(points), dtype=int)
        for k, row in enumerate(points):
            key = tuple(row.tolist())
            if key not in self._index:
                raise KernelDomainError(f"point {key} is not a node of the lookup kernel")
            indices[k] = self._index[key]
        return indices


# ---------------------------------------------------------------------------
# Scalar kernels
# ---------------------------------------------------------------------------


class ScalarKernel(ABC):
    """Symmetric positive-semidefinite scalar kernel."""

    @abstractmethod
    def gram(self, points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
        """Pairwise kernel values between two point arrays."""

    def __call__(self, x, x_prime) -> float:
        return float(self.gram(as_point(x), as_point(x_prime))[0, 0])


@dataclass(frozen=True)
class GaussianScalarKernel(ScalarKernel):
    """Gaussian kernel ``k(x, x') = exp(-||x - x'||^2 / (2 width^2))``."""

    width: float

    def __post_init__(self):
        if not np.isfinite(self.width) or self.width <= 0:
            raise ArgumentError(f"gaussian width must be positive, got {self.width}")

    def gram(self, points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
        points_a = as_points(points_a)
        points_b = as_points(points_b)
        sqdist = np.sum((points_a[:, None, :] - points_b[None, :, :]) ** 2, axis=-1)
        return np.exp(-0.5 * sqdist / self.width ** 2)


class LookupScalarKernel(ScalarKernel):
    """Scalar kernel given by a symmetric table over a finite node set."""

    def __init__(self, nodes, table):
        self._index = _NodeIndex(nodes)
        table = np.array(table, dtype=float)
        size = len(self._index.nodes)
        if table.shape != (size, size):
            raise ArgumentError(f"lookup table must be {size}x{size}, got {table.shape}")
        if not np.allclose(table, table.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise ArgumentError("lookup table is not symmetric")
        scale = max(float(np.max(np.diag(table))), 0.0)
        if size and min_eigenvalue(table) < -PSD_TOL * max(scale, 1e-300):
            raise ArgumentError("lookup table is not positive semidefinite")
        table.setflags(write=False)
        self.table = table

    @property
    def nodes(self) -> np.ndarray:
        return self._index.nodes

    def gram(self, points_a: np.ndarray, points_b: np.ndarray) -> np.ndarray:
        rows = self._index.locate(as_points(points_a))
        cols = self._index.locate(as_points(points_b))
        return self.table[np.ix_(rows, cols)]


# ---------------------------------------------------------------------------
# Coupling matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingMatrix:
    """Symmetric positive-semidefinite ``m x m`` task coupling ``B``."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
            raise ArgumentError(f"coupling must be a nonempty square matrix, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise ArgumentError("coupling contains non-finite entries")
        if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOL:
            raise ArgumentError("coupling matrix is not symmetric")
        trace = float(np.trace(matrix))
        if min_eigenvalue(matrix) < -PSD_TOL * max(trace, 1e-300):
            raise ArgumentError("coupling matrix is not positive semidefinite")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, m: int) -> "CouplingMatrix":
        return cls(np.eye(m))

    @classmethod
    def equicorrelated(cls, m: int, correlation: float) -> "CouplingMatrix":
        """Unit diagonal with every off-diagonal entry equal to ``correlation``."""
        if not 0.0 <= correlation < 1.0:
            raise ArgumentError(f"correlation must lie in [0, 1), got {correlation}")
        return cls((1.0 - correlation) * np.eye(m) + correlation * np.ones((m, m)))


# ---------------------------------------------------------------------------
# Matrix-valued kernels
# ---------------------------------------------------------------------------


class MatrixKernel(ABC):
    """Matrix-valued reproducing kernel with ``m`` tasks."""

    @property
    @abstractmethod
    def m(self) -> int:
        """Number of tasks."""

    @abstractmethod
    def block_gram(self, points_a, points_b) -> np.ndarray:
        """Cross Gram of shape ``(len(a) * m, len(b) * m)``; block ``(i, j)`` is ``K(a_i, b_j)``."""

    def __call__(self, x, x_prime) -> np.ndarray:
        return self.block_gram(as_point(x), as_point(x_prime))

    def diagonal_blocks(self, points) -> np.ndarray:
        """Stack of ``K(x, x)`` for every point, shape ``(count, m, m)``."""
        points = as_points(points)
        return np.stack([self(point, point) for point in points]) if len(points) else np.zeros((0, self.m, self.m))


def _kron_blocks(scalar_gram: np.ndarray, coupling: np.ndarray) -> np.ndarray:
    return np.kron(scalar_gram, coupling)


class SeparableKernel(MatrixKernel):
    """``K(x, x') = k(x, x') B``."""

    def __init__(self, scalar: ScalarKernel, coupling: CouplingMatrix):
        self.scalar = scalar
        self.coupling = coupling

    @property
    def m(self) -> int:
        return self.coupling.m

    def block_gram(self, points_a, points_b) -> np.ndarray:
        return _kron_blocks(self.scalar.gram(as_points(points_a), as_points(points_b)), self.coupling.matrix)

    def diagonal_blocks(self, points) -> np.ndarray:
        points = as_points(points)
        values = np.array([self.scalar(point, point) for point in points])
        return values[:, None, None] * self.coupling.matrix[None, :, :]


class DiagonalKernel(MatrixKernel):
    """``K(x, x') = diag(k_1(x, x'), ..., k_m(x, x'))``; tasks are uncoupled."""

    def __init__(self, scalars: Sequence[ScalarKernel]):
        if not scalars:
            raise ArgumentError("diagonal kernel needs at least one scalar kernel")
        self.scalars: List[ScalarKernel] = list(scalars)

    @property
    def m(self) -> int:
        return len(self.scalars)

    def block_gram(self, points_a, points_b) -> np.ndarray:
        points_a = as_points(points_a)
        points_b = as_points(points_b)
        out = np.zeros((len(points_a), self.m, len(points_b), self.m))
        for task, scalar in enumerate(self.scalars):
            out[:, task, :, task] = scalar.gram(points_a, points_b)
        return out.reshape(len(points_a) * self.m, len(points_b) * self.m)


class SumKernel(MatrixKernel):
    """Finite sum of separable kernels sharing the task count."""

    def __init__(self, terms: Sequence[SeparableKernel]):
        if not terms:
            raise ArgumentError("sum kernel needs at least one term")
        task_counts = {term.m for term in terms}
        if len(task_counts) != 1:
            raise ArgumentError(f"sum kernel terms disagree on task count: {sorted(task_counts)}")
        self.terms: List[SeparableKernel] = list(terms)

    @property
    def m(self) -> int:
        return self.terms[0].m

    def block_gram(self, points_a, points_b) -> np.ndarray:
        return sum(term.block_gram(points_a, points_b) for term in self.terms)


class LookupMatrixKernel(MatrixKernel):
    """Kernel given by explicit ``m x m`` blocks over a finite node set.

    ``blocks[i, j]`` is ``K(z_i, z_j)``.
    """

    def __init__(self, nodes, blocks):
        self._index = _NodeIndex(nodes)
        blocks = np.array(blocks, dtype=float)
        size = len(self._index.nodes)
        if blocks.ndim != 4 or blocks.shape[:2] != (size, size) or blocks.shape[2] != blocks.shape[3]:
            raise ArgumentError(f"lookup blocks must have shape ({size}, {size}, m, m), got {blocks.shape}")
        if not np.all(np.isfinite(blocks)):
            raise ArgumentError("lookup blocks contain non-finite entries")
        if np.max(np.abs(blocks - blocks.transpose(1, 0, 3, 2)), initial=0.0) > SYMMETRY_TOL:
            raise ArgumentError("lookup blocks violate K(x, x') = K(x', x)^T")
        m = blocks.shape[2]
        gram = blocks.transpose(0, 2, 1, 3).reshape(size * m, size * m)
        scale = max(float(np.max(np.diag(gram), initial=0.0)), 0.0)
        if gram.size and min_eigenvalue(gram) < -PSD_TOL * max(scale, 1e-300):
            raise ArgumentError("lookup blocks do not form a positive semidefinite block Gram")
        blocks.setflags(write=False)
        self.blocks = blocks

    @classmethod
    def identity(cls, nodes, m: int = 1) -> "LookupMatrixKernel":
        """``K(z_i, z_j) = [i == j] I_m``."""
        size = len(as_points(nodes))
        blocks = np.zeros((size, size, m, m))
        for i in range(size):
            blocks[i, i] = np.eye(m)
        return cls(nodes, blocks)

    @property
    def nodes(self) -> np.ndarray:
        return self._index.nodes

    @property
    def m(self) -> int:
        return self.blocks.shape[2]

    def block_gram(self, points_a, points_b) -> np.ndarray:
        rows = self._index.locate(as_points(points_a))
        cols = self._index.locate(as_points(points_b))
        selected = self.blocks[np.ix_(rows, cols)]
        return selected.transpose(0, 2, 1, 3).reshape(len(rows) * self.m, len(cols) * self.m)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def eval_kernel(kernel: MatrixKernel, x, x_prime) -> np.ndarray:
    """Return the ``m x m`` matrix ``K(x, x')``."""
    return kernel(x, x_prime)


def block_gram(kernel: MatrixKernel, points_a, points_b) -> np.ndarray:
    """Cross block Gram between two point lists."""
    return kernel.block_gram(points_a, points_b)


def kappa_estimate(kernel: MatrixKernel, nodes) -> float:
    """Maximum over nodes and components ``1 <= i, j <= m`` of ``sqrt(|K_ij(x, x)|)``."""
    nodes = as_points(nodes)
    if len(nodes) == 0:
        raise ArgumentError("kappa needs a nonempty node list")
    return float(np.sqrt(np.max(np.abs(kernel.diagonal_blocks(nodes)))))


def _require_distinct(nodes: np.ndarray) -> None:
    if len(np.unique(nodes, axis=0)) != len(nodes):
        raise ArgumentError("nodes must be distinct for a positive-definiteness check")


def check_positive_definite(kernel: MatrixKernel, nodes) -> float:
    """Smallest eigenvalue of the ``Nm x Nm`` block Gram over distinct nodes."""
    nodes = as_points(nodes)
    if len(nodes) == 0:
        raise ArgumentError("positive-definiteness check needs at least one node")
    _require_distinct(nodes)
    return min_eigenvalue(kernel.block_gram(nodes, nodes))


@dataclass(frozen=True)
class UniversalityReport:
    """Outcome of the finite-space universality test."""

    universal: bool
    min_eigenvalue: float
    threshold: float


def check_universal_on_discrete(kernel: MatrixKernel, space: "DiscreteSpace") -> UniversalityReport:
    """On a finite space, ``K`` is universal iff its full block Gram is nonsingular.

    The Gram counts as nonsingular when its smallest eigenvalue exceeds
    ``1e-10`` times its largest diagonal entry.
    """
    gram = kernel.block_gram(space.nodes, space.nodes)
    smallest = min_eigenvalue(gram)
    threshold = PSD_TOL * float(np.max(np.diag(gram)))
    report = UniversalityReport(universal=smallest > threshold, min_eigenvalue=smallest, threshold=threshold)
    logger.debug("universality_checked", universal=report.universal, min_eigenvalue=smallest)
    return report


@dataclass(frozen=True)
class MatrixNormReport:
    """Largest ``||K(x, x)||_2`` against the candidate bounds ``m kappa`` and ``m kappa^2``."""

    max_norm: float
    kappa: float
    m: int
    bound_m_kappa: float = field(init=False)
    bound_m_kappa_squared: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "bound_m_kappa", self.m * self.kappa)
        object.__setattr__(self, "bound_m_kappa_squared", self.m * self.kappa ** 2)

    @property
    def m_kappa_holds(self) -> bool:
        return self.max_norm <= self.bound_m_kappa * (1 + 1e-12)

    @property
    def m_kappa_squared_holds(self) -> bool:
        return self.max_norm <= self.bound_m_kappa_squared * (1 + 1e-12)


def matrix_norm_bound_report(kernel: MatrixKernel, nodes) -> MatrixNormReport:
    """Exact spectral norms of the diagonal blocks, compared with both bounds."""
    nodes = as_points(nodes)
    blocks = kernel.diagonal_blocks(nodes)
    max_norm = max(float(np.linalg.norm(block, 2)) for block in blocks)
    return MatrixNormReport(max_norm=max_norm, kappa=kappa_estimate(kernel, nodes), m=kernel.m)
