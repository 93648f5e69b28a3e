"""
Multi-task Regularization Networks - Vector-valued RKHS Solver
==============================================================

Assembly of the block Gram system, the regularization network

    f_{z,lambda} = argmin (1/n) sum_i ||f(x_i) - y_i||_2^2 + lambda ||f||_K^2

and evaluation / measurement of the resulting function
``f = sum_i K(x_i, .) c_i``. The coefficients solve
``(A/n + lambda J) c = y/n`` with ``A`` the ``nm x nm`` block Gram.
"""

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import structlog
from scipy import linalg

from main.exceptions import ArgumentError
from main.kernels import MatrixKernel, as_point, as_points
from main.spectral import DiscreteSpace, RhoFunction
from utils.linalg import block_vector, symmetric_solve

logger = structlog.get_logger(__name__)

DENSE_ENVELOPE = 4096


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Sample ``z = {(x_i, y_i)}``.

    Attributes:
        points: ``(n, d)`` input points.
        outputs: ``(n, m)`` outputs.
        node_indices: Index of each point in its discrete space, when known.
        bound: Almost-sure output bound ``M``, when known.
    """

    points: np.ndarray
    outputs: np.ndarray
    node_indices: Optional[np.ndarray] = None
    bound: Optional[float] = None

    def __post_init__(self):
        points = as_points(self.points).copy()
        outputs = np.array(self.outputs, dtype=float)
        if outputs.ndim == 1:
            outputs = outputs.reshape(-1, 1)
        if len(points) < 1:
            raise ArgumentError("a sample needs at least one point")
        if outputs.shape[0] != len(points):
            raise ArgumentError(f"{len(points)} points but {outputs.shape[0]} outputs")
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(outputs)):
            raise ArgumentError("sample contains non-finite entries")
        points.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "outputs", outputs)
        if self.node_indices is not None:
            indices = np.array(self.node_indices, dtype=int).reshape(-1)
            if len(indices) != len(points):
                raise ArgumentError("node index count does not match the point count")
            indices.setflags(write=False)
            object.__setattr__(self, "node_indices", indices)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def m(self) -> int:
        return self.outputs.shape[1]

    def scaled(self, factor: float) -> "SampleSet":
        """Same points with outputs multiplied by ``factor``."""
        return SampleSet(self.points, self.outputs * factor, self.node_indices, self.bound)


@dataclass(frozen=True, eq=False)
class BlockGram:
    """Symmetric block Gram ``A`` with block ``(i, j) = K(x_i, x_j)``."""

    matrix: np.ndarray
    m: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0] // self.m

    def block(self, i: int, j: int) -> np.ndarray:
        m = self.m
        return self.matrix[i * m:(i + 1) * m, j * m:(j + 1) * m]


@dataclass(frozen=True, eq=False)
class RidgeModel:
    """``f = sum_i K(x_i, .) c_i`` with regularization parameter ``lam``."""

    anchors: np.ndarray
    coefficients: np.ndarray
    kernel: MatrixKernel
    lam: float
    anchor_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        anchors = as_points(self.anchors)
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.ndim == 2 and coefficients.shape[1] != self.kernel.m:
            raise ArgumentError(f"coefficients have {coefficients.shape[1]} tasks, kernel has {self.kernel.m}")
        if coefficients.size != len(anchors) * self.kernel.m:
            raise ArgumentError(
                f"{len(anchors)} anchors with {self.kernel.m} tasks need {len(anchors) * self.kernel.m} coefficients, "
                f"got {coefficients.size}"
            )
        coefficients = coefficients.reshape(len(anchors), self.kernel.m)
        coefficients.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "coefficients", coefficients)

    @property
    def m(self) -> int:
        return self.kernel.m

    def evaluate(self, x) -> np.ndarray:
        return self.evaluate_many(as_point(x))[0]

    def evaluate_many(self, points) -> np.ndarray:
        """Values ``sum_i K(x, x_i) c_i`` at every point, shape ``(count, m)``."""
        points = as_points(points)
        if len(points) == 0:
            return np.zeros((0, self.m))
        cross = self.kernel.block_gram(points, self.anchors)
        return (cross @ block_vector(self.coefficients)).reshape(len(points), self.m)

    def with_coefficients(self, coefficients: np.ndarray) -> "RidgeModel":
        return RidgeModel(self.anchors, coefficients, self.kernel, self.lam, self.anchor_indices)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def assemble_gram(kernel: MatrixKernel, points) -> BlockGram:
    """Block Gram over the sample points."""
    points = as_points(points)
    if len(points) == 0:
        raise ArgumentError("cannot assemble a Gram over zero points")
    return BlockGram(kernel.block_gram(points, points), kernel.m)


def _validate_lambda(lam: float) -> float:
    lam = float(lam)
    if not np.isfinite(lam) or lam <= 0:
        raise ArgumentError(f"lambda must be positive and finite, got {lam}")
    return lam


def solve_regularization_network(
    kernel: MatrixKernel,
    sample: SampleSet,
    lam: float,
    space: Optional[DiscreteSpace] = None,
    method: str = "auto",
) -> RidgeModel:
    """Minimize the regularized empirical risk over ``H_K``.

    Args:
        kernel: Matrix-valued kernel with ``m`` tasks.
        sample: Sample with ``m``-dimensional outputs.
        lam: Regularization parameter, positive.
        space: Discrete space holding every sample point; enables the
            node-compressed route.
        method: ``"dense"`` solves ``(A/n + lam J) c = y/n``; ``"nodes"``
            solves the equivalent system over sampled nodes; ``"auto"`` picks
            ``"nodes"`` when ``nm`` exceeds the dense envelope and a space is
            available.

    Returns:
        The fitted model; anchors are the sample points.
    """
    lam = _validate_lambda(lam)
    if sample.m != kernel.m:
        raise ArgumentError(f"sample has {sample.m} outputs, kernel has {kernel.m} tasks")
    if method not in ("auto", "dense", "nodes"):
        raise ArgumentError(f"unknown solve method {method!r}")

    if method == "auto":
        method = "nodes" if space is not None and sample.n * sample.m > DENSE_ENVELOPE else "dense"
    if method == "nodes":
        if space is None:
            raise ArgumentError("the node-compressed solve needs a discrete space")
        return _solve_on_nodes(kernel, sample, lam, space)

    n = sample.n
    gram = kernel.block_gram(sample.points, sample.points)
    system = gram / n + lam * np.eye(gram.shape[0])
    coefficients = symmetric_solve(system, block_vector(sample.outputs) / n)
    logger.debug("solved_dense", n=n, m=kernel.m, lambda_=lam)
    return RidgeModel(sample.points, coefficients, kernel, lam, sample.node_indices)


def _sample_indices(sample: SampleSet, space: DiscreteSpace) -> np.ndarray:
    if sample.node_indices is not None:
        indices = sample.node_indices
        if np.any(indices < 0) or np.any(indices >= space.size):
            raise ArgumentError("sample node index outside the space")
        if not np.array_equal(space.nodes[indices], sample.points):
            raise ArgumentError("sample node indices do not match its points")
        return indices
    return space.indices_of(sample.points)


def _solve_on_nodes(kernel: MatrixKernel, sample: SampleSet, lam: float, space: DiscreteSpace) -> RidgeModel:
    """Node-compressed solve.

    With ``C_k`` the summed coefficients of the samples at node ``z_k``,
    ``D`` the per-node counts and ``Y`` the per-node summed outputs,
    ``(n lam I + D G) C = Y``. Substituting ``C = D^{1/2} u`` over sampled
    nodes gives the symmetric system ``(n lam I + D^{1/2} G D^{1/2}) u = D^{-1/2} Y``.
    Per-sample coefficients follow from ``c_i = (y_i - f(x_i)) / (n lam)``.
    """
    m = kernel.m
    n = sample.n
    indices = _sample_indices(sample, space)
    counts = np.bincount(indices, minlength=space.size)
    sums = np.zeros((space.size, m))
    np.add.at(sums, indices, sample.outputs)

    sampled = np.flatnonzero(counts)
    nodes = space.nodes[sampled]
    root = np.repeat(np.sqrt(counts[sampled].astype(float)), m)
    gram = kernel.block_gram(nodes, nodes)
    system = root[:, None] * gram * root[None, :] + n * lam * np.eye(len(root))
    u = symmetric_solve(system, block_vector(sums[sampled]) / root)
    node_coefficients = root * u

    fitted_nodes = (gram @ node_coefficients).reshape(len(sampled), m)
    position = np.full(space.size, -1)
    position[sampled] = np.arange(len(sampled))
    fitted = fitted_nodes[position[indices]]
    coefficients = (sample.outputs - fitted) / (n * lam)
    logger.debug("solved_on_nodes", n=n, m=m, sampled_nodes=len(sampled), lambda_=lam)
    return RidgeModel(sample.points, coefficients, kernel, lam, indices)


def evaluate(model: RidgeModel, x) -> np.ndarray:
    """``f(x) = sum_i K(x, x_i) c_i``."""
    return model.evaluate(x)


def rkhs_norm(model: RidgeModel) -> float:
    """``||f||_K = sqrt(c^T A c)``."""
    c = block_vector(model.coefficients)
    gram = model.kernel.block_gram(model.anchors, model.anchors)
    return float(np.sqrt(max(float(c @ gram @ c), 0.0)))


def inner_product(model_a: RidgeModel, model_b: RidgeModel) -> float:
    """``<f_a, f_b>_K = c_a^T K(anchors_a, anchors_b) c_b``."""
    if model_a.m != model_b.m:
        raise ArgumentError("models have different task counts")
    cross = model_a.kernel.block_gram(model_a.anchors, model_b.anchors)
    return float(block_vector(model_a.coefficients) @ cross @ block_vector(model_b.coefficients))


def node_coefficients(model: RidgeModel, space: DiscreteSpace) -> np.ndarray:
    """Coefficients summed per space node, ``(N, m)``; ``f = sum_k K(z_k, .) C_k``."""
    indices = model.anchor_indices if model.anchor_indices is not None else space.indices_of(model.anchors)
    summed = np.zeros((space.size, model.m))
    np.add.at(summed, indices, model.coefficients)
    return summed


def empirical_objective(
    f: Union[RidgeModel, RhoFunction],
    sample: SampleSet,
    lam: float,
    k_norm: Optional[float] = None,
) -> float:
    """``(1/n) sum_i ||f(x_i) - y_i||_2^2 + lam ||f||_K^2``.

    A :class:`RhoFunction` is evaluated through the sample's node indices and
    needs its K-norm passed as ``k_norm``.
    """
    if isinstance(f, RidgeModel):
        values = f.evaluate_many(sample.points)
        norm = rkhs_norm(f) if k_norm is None else k_norm
    else:
        if sample.node_indices is None:
            raise ArgumentError("node-value functions need a sample with node indices")
        if k_norm is None:
            raise ArgumentError("node-value functions need their K-norm")
        values = f.values[sample.node_indices]
        norm = k_norm
    residual = values - sample.outputs
    return float(np.sum(residual ** 2) / sample.n + lam * norm ** 2)


def verify_representer_identity(
    kernel: MatrixKernel,
    sample: SampleSet,
    lam: float,
    space: DiscreteSpace,
) -> float:
    """Max node-value discrepancy between the coefficient and operator routes.

    The coefficient route solves ``(A/n + lam J) c = y/n`` and evaluates at
    every node. The operator route solves ``(S_x^* S_x / n + lam I) f = S_x^* y / n``
    in full node-value coordinates, where ``S_x^* S_x f`` has node values
    ``sum_i G_col(x_i) f(x_i)``.
    """
    lam = _validate_lambda(lam)
    indices = _sample_indices(sample, space)
    m = kernel.m
    n = sample.n

    model = solve_regularization_network(kernel, sample, lam, method="dense")
    coefficient_route = model.evaluate_many(space.nodes)

    gram = kernel.block_gram(space.nodes, space.nodes)
    counts = np.repeat(np.bincount(indices, minlength=space.size).astype(float), m)
    sums = np.zeros((space.size, m))
    np.add.at(sums, indices, sample.outputs)
    operator = gram * counts[None, :] / n + lam * np.eye(gram.shape[0])
    rhs = gram @ block_vector(sums) / n
    operator_route = linalg.solve(operator, rhs).reshape(space.size, m)

    return float(np.max(np.abs(coefficient_route - operator_route)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def kernel_spec_hash(spec: dict) -> str:
    """SHA-256 of the canonical JSON form of a kernel specification."""
    canonical = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def model_to_dict(model: RidgeModel, spec_hash: str, space: Optional[DiscreteSpace] = None) -> dict:
    """JSON-ready record: anchors as node indices, row-major coefficients, lambda, kernel hash."""
    if model.anchor_indices is not None:
        anchors = model.anchor_indices
    elif space is not None:
        anchors = space.indices_of(model.anchors)
    else:
        raise ArgumentError("serializing a model needs node indices for its anchors")
    return {
        "anchors": [int(index) for index in anchors],
        "coefficients": [[float(value) for value in row] for row in model.coefficients],
        "lambda": float(model.lam),
        "m": model.m,
        "kernel_spec_hash": spec_hash,
    }


def model_from_dict(record: dict, kernel: MatrixKernel, space: DiscreteSpace, spec_hash: str) -> RidgeModel:
    """Rebuild a model; the stored kernel hash must match ``spec_hash``."""
    if record.get("kernel_spec_hash") != spec_hash:
        raise ArgumentError("model was fitted with a different kernel specification")
    try:
        indices = np.array(record["anchors"], dtype=int)
        coefficients = np.array(record["coefficients"], dtype=float).reshape(len(indices), kernel.m)
        lam = float(record["lambda"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArgumentError(f"malformed model record: {exc}") from exc
    if np.any(indices < 0) or np.any(indices >= space.size):
        raise ArgumentError("model anchor index outside the space")
    return RidgeModel(space.nodes[indices], coefficients, kernel, _validate_lambda(lam), indices)
