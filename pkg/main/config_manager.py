"""
Multi-task Regularization Networks - Configuration Management
=============================================================

pydantic models for the JSON experiment configs, builders that turn a
validated kernel or space spec into library objects, and the runtime
settings read from ``config/system.json`` and ``MTRN_*`` environment
variables.
"""

import json
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator
from pydantic_settings import BaseSettings, JsonConfigSettingsSource, SettingsConfigDict

from main.exceptions import ArgumentError
from main.kernels import (
    CouplingMatrix,
    DiagonalKernel,
    GaussianScalarKernel,
    LookupMatrixKernel,
    LookupScalarKernel,
    MatrixKernel,
    ScalarKernel,
    SeparableKernel,
    SumKernel,
)
from main.rkhs import kernel_spec_hash
from main.spectral import DiscreteSpace

logger = structlog.get_logger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parents[1]
SYSTEM_CONFIG = PROJECT_ROOT / "config" / "system.json"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Kernel specs
# ---------------------------------------------------------------------------


class GaussianScalarSpec(StrictModel):
    variant: Literal["gaussian"] = "gaussian"
    width: float = Field(gt=0)


class LookupScalarSpec(StrictModel):
    """Symmetric table indexed by the space nodes."""

    variant: Literal["lookup"] = "lookup"
    table: List[List[float]]


ScalarKernelSpec = Annotated[Union[GaussianScalarSpec, LookupScalarSpec], Field(discriminator="variant")]


class CouplingFamily(StrictModel):
    """Coupling matrix defined for every task count."""

    family: Literal["identity", "equicorrelated"]
    correlation: float = Field(default=0.0, ge=0.0, lt=1.0)


CouplingSpec = Union[CouplingFamily, List[List[float]]]


class SeparableSpec(StrictModel):
    variant: Literal["separable"] = "separable"
    scalar: ScalarKernelSpec
    coupling: CouplingSpec = Field(default_factory=lambda: CouplingFamily(family="identity"))


class DiagonalSpec(StrictModel):
    """One scalar kernel per task; a single entry is shared by every task."""

    variant: Literal["diagonal"] = "diagonal"
    scalars: List[ScalarKernelSpec] = Field(min_length=1)


class SumSpec(StrictModel):
    variant: Literal["sum"] = "sum"
    terms: List[SeparableSpec] = Field(min_length=1)


class LookupMatrixSpec(StrictModel):
    """Explicit ``(N, N, m, m)`` blocks over the space nodes, or a preset."""

    variant: Literal["lookup"] = "lookup"
    preset: Optional[Literal["identity"]] = None
    blocks: Optional[List[List[List[List[float]]]]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.preset is None) == (self.blocks is None):
            raise ValueError("give exactly one of 'preset' and 'blocks'")
        return self


MatrixKernelSpec = Annotated[
    Union[SeparableSpec, DiagonalSpec, SumSpec, LookupMatrixSpec],
    Field(discriminator="variant"),
]


# ---------------------------------------------------------------------------
# Space specs
# ---------------------------------------------------------------------------


class GridSpaceSpec(StrictModel):
    """Uniform grid on ``[start, stop]`` with uniform weights."""

    kind: Literal["grid"] = "grid"
    start: float = 0.0
    stop: float = 1.0
    count: int = Field(ge=1)


class NodeSpaceSpec(StrictModel):
    """Explicit nodes (scalars or coordinate lists) with optional weights."""

    kind: Literal["nodes"] = "nodes"
    nodes: Union[List[float], List[List[float]]] = Field(min_length=1)
    weights: Optional[List[float]] = None


SpaceSpec = Annotated[Union[GridSpaceSpec, NodeSpaceSpec], Field(discriminator="kind")]


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


class Tolerances(StrictModel):
    symmetry: float = 1e-12
    psd: float = 1e-10
    identity: float = 1e-9
    excess_risk: float = 1e-12


class FaultInjection(StrictModel):
    """Test hook: add one to a single off-diagonal block Gram entry before the symmetry check."""

    flip_gram_entry: Optional[Tuple[int, int]] = None

    @field_validator("flip_gram_entry")
    @classmethod
    def _off_diagonal(cls, value):
        if value is not None and value[0] == value[1]:
            raise ValueError("the flipped entry must be off the diagonal")
        return value


class VerifySection(StrictModel):
    instances: int = Field(default=10, ge=1)
    sample_size: int = Field(default=4, ge=1)
    lam: float = Field(default=0.1, gt=0)
    r: float = Field(default=1.0, gt=0.5, le=1.0)
    sigma: float = Field(default=0.1, ge=0)
    lambdas: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 1e-1, 1.0])
    fault_injection: FaultInjection = Field(default_factory=FaultInjection)


class LambdaRule(StrictModel):
    rule: Literal["optimal", "fixed", "grid"] = "optimal"
    value: Optional[float] = Field(default=None, gt=0)
    values: Optional[List[float]] = None

    @model_validator(mode="after")
    def _rule_arguments(self):
        if self.rule == "fixed" and self.value is None:
            raise ValueError("the fixed rule needs 'value'")
        if self.rule == "grid":
            if not self.values:
                raise ValueError("the grid rule needs a nonempty 'values' list")
            if any(value <= 0 for value in self.values):
                raise ValueError("grid lambdas must be positive")
        return self


class RateSection(StrictModel):
    n_grid: List[int] = Field(min_length=1)
    m_grid: List[int] = Field(min_length=1)
    trials: int = Field(default=200, ge=1)
    delta: float = 0.05
    r: float = 1.0
    bound: float = Field(default=1.0, gt=0)
    sigma: float = Field(default=0.2, ge=0)
    target_modes: Optional[int] = Field(default=None, ge=1)
    lambda_rule: LambdaRule = Field(default_factory=LambdaRule)
    solve_method: Literal["auto", "dense", "nodes"] = "auto"

    @field_validator("n_grid", "m_grid")
    @classmethod
    def _positive_grid(cls, values):
        if any(value < 1 for value in values):
            raise ValueError("grid entries must be positive")
        return values

    @field_validator("delta")
    @classmethod
    def _delta_range(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        return value

    @field_validator("r")
    @classmethod
    def _smoothness(cls, value):
        if not 0.5 < value <= 1.0:
            raise ValueError("r must lie in (1/2, 1]")
        return value

    @model_validator(mode="after")
    def _noise_budget(self):
        if self.sigma >= 0.9 * self.bound:
            raise ValueError("sigma must stay below 0.9 * bound so the target keeps a positive sup-norm budget")
        return self


class RateExperimentConfig(RateSection):
    """Everything one rate experiment needs."""

    kernel: MatrixKernelSpec
    space: SpaceSpec
    seed: int = Field(default=0, ge=0)


class SolveSection(StrictModel):
    dataset: Path
    lam: float = Field(gt=0)
    trial: int = 0
    bound: Optional[float] = Field(default=None, gt=0)
    predict_nodes: Optional[List[int]] = None
    method: Literal["auto", "dense", "nodes"] = "auto"


class ApproxSection(StrictModel):
    r_values: List[float] = Field(default_factory=lambda: [0.6, 0.75, 1.0])
    lambdas: List[float] = Field(default_factory=lambda: list(np.logspace(-4, 0, 13)))
    targets: int = Field(default=20, ge=1)
    target_modes: Optional[int] = Field(default=None, ge=1)

    @field_validator("r_values")
    @classmethod
    def _smoothness(cls, values):
        if not values or any(not 0.5 < value <= 1.0 for value in values):
            raise ValueError("every r must lie in (1/2, 1]")
        return values


class ExperimentConfig(StrictModel):
    """Top-level JSON config shared by every subcommand."""

    kernel: MatrixKernelSpec
    space: SpaceSpec
    m: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    verify: VerifySection = Field(default_factory=VerifySection)
    rate: Optional[RateSection] = None
    solve: Optional[SolveSection] = None
    approx: ApproxSection = Field(default_factory=ApproxSection)

    _source_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @property
    def source_dir(self) -> Path:
        return self._source_dir

    def rate_experiment(self) -> RateExperimentConfig:
        if self.rate is None:
            raise ArgumentError("config has no 'rate' section")
        return RateExperimentConfig(
            kernel=self.kernel.model_dump(), space=self.space.model_dump(), seed=self.seed, **self.rate.model_dump()
        )

    def dataset_path(self) -> Path:
        if self.solve is None:
            raise ArgumentError("config has no 'solve' section")
        path = self.solve.dataset
        return path if path.is_absolute() else self._source_dir / path

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        updated = self.model_copy(update={"seed": int(seed)})
        updated._source_dir = self._source_dir
        return updated


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Parse and validate a JSON config file.

    Raises:
        ArgumentError: If the file is missing or not valid JSON.
        pydantic.ValidationError: If the document violates the schema.
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            document = json.load(f)
    except FileNotFoundError as exc:
        raise ArgumentError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"config file {path} is not valid JSON: {exc}") from exc
    config = ExperimentConfig.model_validate(document)
    config._source_dir = path.resolve().parent
    logger.debug("config_loaded", path=str(path), kernel=config.kernel.variant)
    return config


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_space(spec: SpaceSpec) -> DiscreteSpace:
    if isinstance(spec, GridSpaceSpec):
        return DiscreteSpace.uniform_grid(spec.start, spec.stop, spec.count)
    nodes = np.array(spec.nodes, dtype=float)
    if spec.weights is None:
        return DiscreteSpace.uniform(nodes)
    return DiscreteSpace(nodes, np.array(spec.weights, dtype=float))


def build_scalar(spec: ScalarKernelSpec, space: DiscreteSpace) -> ScalarKernel:
    if isinstance(spec, GaussianScalarSpec):
        return GaussianScalarKernel(spec.width)
    return LookupScalarKernel(space.nodes, spec.table)


def build_coupling(spec: CouplingSpec, m: int) -> CouplingMatrix:
    if isinstance(spec, CouplingFamily):
        if spec.family == "identity":
            return CouplingMatrix.identity(m)
        return CouplingMatrix.equicorrelated(m, spec.correlation)
    coupling = CouplingMatrix(np.array(spec, dtype=float))
    if coupling.m != m:
        raise ArgumentError(f"coupling matrix is {coupling.m}x{coupling.m} but m = {m}")
    return coupling


def build_kernel(spec: MatrixKernelSpec, m: int, space: DiscreteSpace) -> MatrixKernel:
    """Matrix-valued kernel with ``m`` tasks from a validated spec."""
    if m < 1:
        raise ArgumentError(f"task count must be positive, got {m}")
    if isinstance(spec, SeparableSpec):
        return SeparableKernel(build_scalar(spec.scalar, space), build_coupling(spec.coupling, m))
    if isinstance(spec, DiagonalSpec):
        scalars = [build_scalar(scalar, space) for scalar in spec.scalars]
        if len(scalars) == 1:
            scalars = scalars * m
        if len(scalars) != m:
            raise ArgumentError(f"diagonal kernel lists {len(scalars)} scalar kernels but m = {m}")
        return DiagonalKernel(scalars)
    if isinstance(spec, SumSpec):
        return SumKernel([build_kernel(term, m, space) for term in spec.terms])
    if spec.preset == "identity":
        return LookupMatrixKernel.identity(space.nodes, m)
    kernel = LookupMatrixKernel(space.nodes, np.array(spec.blocks, dtype=float))
    if kernel.m != m:
        raise ArgumentError(f"lookup blocks are {kernel.m}x{kernel.m} but m = {m}")
    return kernel


def spec_hash(spec: MatrixKernelSpec, m: int) -> str:
    """Hash identifying a kernel spec at a task count."""
    return kernel_spec_hash({"kernel": spec.model_dump(mode="json"), "m": int(m)})


# ---------------------------------------------------------------------------
# Runtime settings
# ---------------------------------------------------------------------------


class RuntimeSettings(BaseSettings):
    """Process-wide settings: ``config/system.json`` overridden by ``MTRN_*`` variables."""

    model_config = SettingsConfigDict(env_prefix="MTRN_", json_file=SYSTEM_CONFIG, extra="ignore")

    log_level: str = "INFO"
    log_file: Optional[str] = None
    workers: int = Field(default=1, ge=1)
    output_dir: Path = Path("results")

    @classmethod
    def settings_customise_sources(
        cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings
    ):
        return (init_settings, env_settings, JsonConfigSettingsSource(settings_cls), file_secret_settings)
