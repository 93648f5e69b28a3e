"""
Multi-task Regularization Networks - Synthetic Targets and Data
===============================================================

Regression targets satisfying the source condition
``f_rho = L_K^r g`` with known source norm ``nu = ||g||_rho``, and bounded
noisy datasets whose conditional mean is exactly ``f_rho``.

Randomness comes from numpy's counter-based Philox generator. Streams are
derived from a master seed through ``SeedSequence`` spawn keys:
``(0, m)`` for the target of task count ``m`` and ``(1, n, m, trial)`` for a
trial, so every trial owns a disjoint substream regardless of scheduling.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from main.exceptions import ArgumentError, PreconditionError
from main.rkhs import SampleSet
from main.spectral import DiscreteSpace, RhoFunction, SpectralDecomposition

logger = structlog.get_logger(__name__)

SeedLike = Union[int, np.random.SeedSequence]

TARGET_STREAM = 0
TRIAL_STREAM = 1
SWEEP_STREAM = 2
TARGET_BUDGET_FRACTION = 0.9


def make_generator(seed: SeedLike) -> np.random.Generator:
    """Philox generator for an integer seed or a derived ``SeedSequence``."""
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(sequence))


def target_seed(master_seed: int, m: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(TARGET_STREAM, int(m)))


def trial_seed(master_seed: int, n: int, m: int, trial: int) -> np.random.SeedSequence:
    """Substream of one trial, determined only by ``(master_seed, n, m, trial)``."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(TRIAL_STREAM, int(n), int(m), int(trial)))


def sweep_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(SWEEP_STREAM, int(index)))


@dataclass(frozen=True)
class NoiseSpec:
    """Componentwise uniform noise on ``[-sigma, sigma]`` with a.s. output bound ``bound``."""

    sigma: float
    bound: float

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ArgumentError(f"noise half-width must be nonnegative, got {self.sigma}")
        if not np.isfinite(self.bound) or self.bound <= 0:
            raise ArgumentError(f"output bound M must be positive, got {self.bound}")

    @property
    def variance(self) -> float:
        """Per-component variance ``sigma^2 / 3``."""
        return self.sigma ** 2 / 3.0

    def target_budget(self) -> float:
        """Sup-norm allotted to a generated target: ``0.9 M - sigma``."""
        return TARGET_BUDGET_FRACTION * self.bound - self.sigma


@dataclass(frozen=True, eq=False)
class SourceTarget:
    """``f_rho = sum_j d_j lambda_j^r phi_j`` over the leading ``len(d)`` modes.

    Attributes:
        decomposition: Spectral decomposition the target is built on.
        coefficients: Source coefficients ``d``.
        r: Smoothness exponent in ``(1/2, 1]``.
        f_rho: Node values of the target.
        source_norm: ``nu = ||d||_2 = ||L_K^{-r} f_rho||_rho``.
        sup_norm: ``max_z ||f_rho(z)||_inf``.
    """

    decomposition: SpectralDecomposition
    coefficients: np.ndarray
    r: float
    f_rho: RhoFunction
    source_norm: float
    sup_norm: float
    kernel_coordinates: np.ndarray = field(init=False)

    def __post_init__(self):
        eigenvalues = self.decomposition.eigenvalues[: len(self.coefficients)]
        coordinates = np.zeros(self.decomposition.rank)
        coordinates[: len(self.coefficients)] = self.coefficients * eigenvalues ** (self.r - 0.5)
        coordinates.setflags(write=False)
        object.__setattr__(self, "kernel_coordinates", coordinates)

    @property
    def space(self) -> DiscreteSpace:
        return self.decomposition.space

    @property
    def m(self) -> int:
        return self.decomposition.m

    @property
    def k_norm(self) -> float:
        """``||f_rho||_K = sqrt(sum_j d_j^2 lambda_j^{2r - 1})``."""
        return float(np.linalg.norm(self.kernel_coordinates))

    def rebuild(self) -> "SourceTarget":
        """Target rebuilt from the stored coefficients."""
        return build_source_target(self.decomposition, self.r, coefficients=self.coefficients)


def build_source_target(
    dec: SpectralDecomposition,
    r: float,
    coefficients: Optional[Sequence[float]] = None,
    seed: Optional[SeedLike] = None,
    modes: Optional[int] = None,
    sup_norm_budget: Optional[float] = None,
) -> SourceTarget:
    """Build a source-condition target.

    Args:
        dec: Decomposition of ``L_K`` on the discrete space.
        r: Smoothness, ``1/2 < r <= 1``.
        coefficients: Explicit source coefficients ``d``.
        seed: Seed for drawing ``d_j`` uniform on ``[-1, 1]`` when no
            coefficients are given.
        modes: Number of drawn modes; defaults to the numerical rank.
        sup_norm_budget: When given, ``d`` is rescaled so the target's sup
            norm equals this budget.

    Returns:
        The target with its source norm and sup norm.
    """
    if not 0.5 < r <= 1.0:
        raise ArgumentError(f"smoothness r must lie in (1/2, 1], got {r}")
    if coefficients is not None:
        d = np.array(coefficients, dtype=float).reshape(-1)
        if len(d) == 0:
            raise ArgumentError("a target needs at least one source coefficient")
    else:
        if seed is None:
            raise ArgumentError("either coefficients or a seed must be given")
        count = dec.rank if modes is None else int(modes)
        if count < 1:
            raise ArgumentError(f"a target needs at least one mode, got {count}")
        if count > dec.rank:
            raise ArgumentError(f"{count} modes requested but the numerical rank is {dec.rank}")
        d = make_generator(seed).uniform(-1.0, 1.0, size=count)
    if len(d) > dec.rank:
        raise ArgumentError(f"mode index {len(d)} exceeds the numerical rank {dec.rank}")
    if not np.all(np.isfinite(d)):
        raise ArgumentError("source coefficients must be finite")

    eigenvalues = dec.eigenvalues[: len(d)]
    f_rho = dec.synthesize(d * eigenvalues ** r)
    if sup_norm_budget is not None:
        if sup_norm_budget <= 0:
            raise ArgumentError(f"target sup-norm budget must be positive, got {sup_norm_budget}")
        current = f_rho.sup_norm()
        if current == 0.0:
            raise ArgumentError("cannot rescale a target that vanishes on every node")
        d = d * (sup_norm_budget / current)
        f_rho = dec.synthesize(d * eigenvalues ** r)

    d.setflags(write=False)
    target = SourceTarget(
        decomposition=dec,
        coefficients=d,
        r=float(r),
        f_rho=f_rho,
        source_norm=float(np.linalg.norm(d)),
        sup_norm=f_rho.sup_norm(),
    )
    logger.debug("target_built", modes=len(d), r=r, source_norm=target.source_norm, sup_norm=target.sup_norm)
    return target


def sample_dataset(target: SourceTarget, noise: NoiseSpec, n: int, seed: SeedLike) -> SampleSet:
    """Draw ``n`` i.i.d. pairs ``(x_i, f_rho(x_i) + eps_i)``.

    Points follow the space weights; ``eps_i`` is uniform on
    ``[-sigma, sigma]^m`` componentwise.

    Raises:
        PreconditionError: If ``sup_norm + sigma > M``.
    """
    if target.sup_norm + noise.sigma > noise.bound:
        raise PreconditionError(
            f"target sup norm {target.sup_norm:.6g} plus noise {noise.sigma:.6g} exceeds the output bound {noise.bound:.6g}"
        )
    if n < 1:
        raise ArgumentError(f"sample size must be at least 1, got {n}")
    space = target.space
    rng = make_generator(seed)
    indices = rng.choice(space.size, size=int(n), p=space.weights)
    eps = rng.uniform(-noise.sigma, noise.sigma, size=(int(n), target.m))
    outputs = target.f_rho.values[indices] + eps
    return SampleSet(points=space.nodes[indices], outputs=outputs, node_indices=indices, bound=noise.bound)


def conditional_second_moment(target: SourceTarget, noise: NoiseSpec, f: RhoFunction) -> np.ndarray:
    """``E[||y - f(x)||_2^2 | x = z_k]`` per node: squared bias plus ``m sigma^2 / 3``."""
    if f.space != target.space or f.m != target.m:
        raise ArgumentError("function does not live on the target's space")
    bias = np.sum((f.values - target.f_rho.values) ** 2, axis=1)
    return bias + target.m * noise.variance


def expected_risk(target: SourceTarget, noise: NoiseSpec, f: RhoFunction) -> float:
    """Least-squares risk ``E(f) = sum_k w_k E[||y - f(z_k)||^2 | z_k]``."""
    return float(np.sum(target.space.weights * conditional_second_moment(target, noise, f)))


class ExcessRisk(NamedTuple):
    lhs: float
    rhs: float
    gap: float


def excess_risk_check(target: SourceTarget, noise: NoiseSpec, f: RhoFunction) -> ExcessRisk:
    """``E(f) - E(f_rho)`` against ``||f - f_rho||_rho^2``."""
    lhs = expected_risk(target, noise, f) - target.m * noise.variance
    rhs = (f - target.f_rho).norm() ** 2
    return ExcessRisk(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def _output_columns(m: int):
    return [f"y_{p + 1}" for p in range(m)]


def write_dataset_csv(path: Union[str, Path], datasets: Mapping[int, SampleSet]) -> Path:
    """Write samples as ``trial, i, node_index, y_1..y_m``."""
    path = Path(path)
    frames = []
    m = None
    for trial in sorted(datasets):
        sample = datasets[trial]
        if sample.node_indices is None:
            raise ArgumentError("dataset export needs node indices")
        if m is not None and sample.m != m:
            raise ArgumentError("every trial of a dataset file must share the task count")
        m = sample.m
        frame = pd.DataFrame(sample.outputs, columns=_output_columns(m))
        frame.insert(0, "node_index", sample.node_indices)
        frame.insert(0, "i", np.arange(sample.n))
        frame.insert(0, "trial", trial)
        frames.append(frame)
    if not frames:
        raise ArgumentError("no datasets to write")
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_dataset_csv(path: Union[str, Path], space: DiscreteSpace, bound: Optional[float] = None) -> Dict[int, SampleSet]:
    """Read a dataset file into one sample per trial.

    Raises:
        ArgumentError: For a missing column or a malformed row; the message
            names the offending data row (1-based).
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise ArgumentError(f"dataset file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ArgumentError(f"malformed dataset file {path}: {exc}") from exc

    outputs = [column for column in frame.columns if column.startswith("y_")]
    required = ["trial", "i", "node_index"]
    missing = [column for column in required if column not in frame.columns]
    if missing or not outputs:
        raise ArgumentError(f"dataset file {path} lacks columns {missing or ['y_1']}")
    if outputs != _output_columns(len(outputs)):
        raise ArgumentError(f"dataset output columns must be y_1..y_m, got {outputs}")

    numeric = frame[required + outputs].apply(pd.to_numeric, errors="coerce")
    bad_rows = numeric.index[~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)]
    if len(bad_rows):
        row = int(bad_rows[0]) + 1
        raise ArgumentError(f"malformed dataset row {row}: {','.join(frame.iloc[row - 1].astype(str).tolist())}")
    integral = numeric[required]
    bad_rows = integral.index[(integral != integral.round()).any(axis=1)]
    if len(bad_rows):
        raise ArgumentError(f"malformed dataset row {int(bad_rows[0]) + 1}: non-integer index")
    bad_rows = numeric.index[(numeric["node_index"] < 0) | (numeric["node_index"] >= space.size)]
    if len(bad_rows):
        raise ArgumentError(f"malformed dataset row {int(bad_rows[0]) + 1}: node index outside the space")

    datasets = {}
    for trial, rows in numeric.groupby("trial", sort=True):
        rows = rows.sort_values("i", kind="stable")
        indices = rows["node_index"].to_numpy(dtype=int)
        datasets[int(trial)] = SampleSet(
            points=space.nodes[indices],
            outputs=rows[outputs].to_numpy(dtype=float),
            node_indices=indices,
            bound=bound,
        )
    logger.info("dataset_loaded", path=str(path), trials=len(datasets), rows=len(frame))
    return datasets
