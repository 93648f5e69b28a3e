"""
Multi-task Regularization Networks - Learning Rates
===================================================

Closed-form error bounds for the regularization network, exact diagnostics
of the intermediate inequalities, and the Monte Carlo rate experiment that
checks them across a grid of sample sizes ``n`` and task counts ``m``.

Every error is computed exactly on the discrete space: the K-norm of a
function ``sum_k K(z_k, .) C_k`` is the 2-norm of its spectral coordinates
``sqrt(lambda_j) v_j^T W^{-1/2} C``, and the rho-norm is a weighted sum over
nodes.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import groupby
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from main.config_manager import LambdaRule, RateExperimentConfig, build_kernel, build_space
from main.exceptions import ArgumentError, HypothesisViolation
from main.kernels import MatrixKernel, check_universal_on_discrete, kappa_estimate
from main.rkhs import RidgeModel, SampleSet, node_coefficients, solve_regularization_network
from main.spectral import (
    ApproximationError,
    RhoFunction,
    SpectralDecomposition,
    approximation_error,
    compute_f_lambda,
    eigendecompose,
)
from main.synth import (
    NoiseSpec,
    SourceTarget,
    build_source_target,
    expected_risk,
    sample_dataset,
    sweep_seed,
    target_seed,
    trial_seed,
)

logger = structlog.get_logger(__name__)

MAX_DELTA = 2.0 / math.e
INVARIANT_SLACK = 1e-10
SLOPE_SLACK = 0.05

CSV_COLUMNS = (
    "n",
    "m",
    "lambda",
    "trial",
    "err_rho",
    "err_K",
    "sampling_err_K",
    "approx_err_K",
    "bound_rho",
    "bound_sampling_K",
    "violated_rho",
    "violated_sampling",
)


# ---------------------------------------------------------------------------
# Closed-form bounds
# ---------------------------------------------------------------------------


def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not np.isfinite(value) or value <= 0:
            raise ArgumentError(f"{name} must be positive and finite, got {value}")


def _require_smoothness(r: float) -> None:
    if not 0.5 < r <= 1.0:
        raise ArgumentError(f"smoothness r must lie in (1/2, 1], got {r}")


def log_confidence(delta: float) -> float:
    """``log(2 / delta)``, which the rate theorems need to be at least one."""
    if not 0.0 < delta < 1.0:
        raise ArgumentError(f"delta must lie in (0, 1), got {delta}")
    value = math.log(2.0 / delta)
    if value < 1.0:
        raise HypothesisViolation("log(2/delta) >= 1", f"delta = {delta} exceeds 2/e; log(2/delta) = {value:.6f} < 1")
    return value


def lambda_rule(n: int, m: int, r: float, kappa: float, output_bound: float, nu: float) -> float:
    """``lambda = (3 kappa M / nu)^{2/(2r+1)} n^{-1/(2r+1)} m^{2/(2r+1)}``."""
    _require_positive(n=n, m=m, kappa=kappa, output_bound=output_bound, nu=nu)
    _require_smoothness(r)
    power = 2.0 / (2.0 * r + 1.0)
    return (3.0 * kappa * output_bound / nu) ** power * n ** (-1.0 / (2.0 * r + 1.0)) * m ** power


def theoretical_rate_bound(
    n: int, m: int, r: float, kappa: float, output_bound: float, nu: float, delta: float
) -> float:
    """High-probability bound on ``||f_{z,lambda} - f_rho||_rho`` at the rule's lambda."""
    _require_positive(n=n, m=m, kappa=kappa, output_bound=output_bound, nu=nu)
    _require_smoothness(r)
    log_term = log_confidence(delta)
    return (
        4.0
        * kappa
        * log_term
        * (3.0 * kappa * output_bound) ** ((2.0 * r - 1.0) / (2.0 * r + 1.0))
        * nu ** (2.0 / (2.0 * r + 1.0))
        * m ** ((6.0 * r - 1.0) / (4.0 * r + 2.0))
        * n ** (-(2.0 * r - 1.0) / (4.0 * r + 2.0))
    )


def k_norm_rate_bound(
    n: int, m: int, r: float, kappa: float, output_bound: float, nu: float, delta: float
) -> float:
    """High-probability bound on ``||f_{z,lambda} - f_rho||_K`` at the rule's lambda."""
    _require_positive(n=n, m=m, kappa=kappa, output_bound=output_bound, nu=nu)
    _require_smoothness(r)
    log_term = log_confidence(delta)
    return (
        4.0
        * log_term
        * (3.0 * kappa * output_bound) ** ((2.0 * r - 1.0) / (2.0 * r + 1.0))
        * nu ** (2.0 / (2.0 * r + 1.0))
        * n ** (-(2.0 * r - 1.0) / (4.0 * r + 2.0))
        * m ** ((2.0 * r - 1.0) / (2.0 * r + 1.0))
    )


def sampling_error_bound(n: int, m: int, lam: float, kappa: float, output_bound: float, delta: float) -> float:
    """``6 m kappa M log(2/delta) / (sqrt(n) lambda)``; requires ``kappa >= 1``."""
    _require_positive(n=n, m=m, lam=lam, kappa=kappa, output_bound=output_bound)
    if kappa < 1.0:
        raise HypothesisViolation("kappa >= 1", f"kappa = {kappa:.6g} is below 1")
    return 6.0 * m * kappa * output_bound * log_confidence(delta) / (math.sqrt(n) * lam)


def total_error_bound(
    n: int, m: int, lam: float, r: float, kappa: float, output_bound: float, nu: float, delta: float
) -> float:
    """K-norm bound ``2 log(2/delta) (3 m kappa M / (sqrt(n) lambda) + lambda^{r - 1/2} nu)`` at any lambda."""
    _require_positive(n=n, m=m, lam=lam, kappa=kappa, output_bound=output_bound, nu=nu)
    _require_smoothness(r)
    log_term = log_confidence(delta)
    return 2.0 * log_term * (3.0 * m * kappa * output_bound / (math.sqrt(n) * lam) + lam ** (r - 0.5) * nu)


def rho_error_bound(
    n: int, m: int, lam: float, r: float, kappa: float, output_bound: float, nu: float, delta: float
) -> float:
    """rho-norm bound ``kappa sqrt(m)`` times :func:`total_error_bound`."""
    return kappa * math.sqrt(m) * total_error_bound(n, m, lam, r, kappa, output_bound, nu, delta)


def bennett_bound(m_tilde: float, variance: float, n: int, delta: float) -> float:
    """Hilbert-space Bennett deviation ``2 M~ log(2/delta)/n + sqrt(2 sigma^2 log(2/delta)/n)``."""
    _require_positive(n=n)
    if m_tilde < 0 or variance < 0:
        raise ArgumentError("Bennett constants must be nonnegative")
    log_term = log_confidence(delta)
    return 2.0 * m_tilde * log_term / n + math.sqrt(2.0 * variance * log_term / n)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FLambdaDiagnostics:
    """Norms of the data-free minimizer against their closed-form bounds."""

    lam: float
    k_norm: float
    risk: float
    sup_norm: float
    k_norm_bound: float
    risk_bound: float
    sup_norm_bound: float

    @property
    def k_norm_holds(self) -> bool:
        return self.k_norm <= self.k_norm_bound * (1 + 1e-12)

    @property
    def risk_holds(self) -> bool:
        return self.risk <= self.risk_bound * (1 + 1e-12)

    @property
    def sup_norm_holds(self) -> bool:
        return self.sup_norm <= self.sup_norm_bound * (1 + 1e-12)

    @property
    def passed(self) -> bool:
        return self.k_norm_holds and self.risk_holds and self.sup_norm_holds


def f_lambda_coordinates(dec: SpectralDecomposition, f_rho: RhoFunction, lam: float) -> np.ndarray:
    """K-coordinates of ``f_lambda``: ``sqrt(lambda_j) a_j / (lambda_j + lambda)`` with ``a_j = <f_rho, phi_j>``."""
    retained = dec.retained_eigenvalues
    return np.sqrt(retained) * dec.coefficients(f_rho)[: dec.rank] / (retained + lam)


def flambda_diagnostics(
    dec: SpectralDecomposition,
    target: SourceTarget,
    lam: float,
    kappa: float,
    output_bound: float,
    noise_sigma: float = 0.0,
) -> FLambdaDiagnostics:
    """Check ``||f_lambda||_K <= sqrt(m) M / sqrt(lambda)``, ``E(f_lambda) <= 2 m M^2``
    and ``||f_lambda||_inf <= kappa sqrt(m) M / sqrt(lambda)``.

    ``E`` is the least-squares risk under the target's uniform noise of
    half-width ``noise_sigma``.
    """
    _require_positive(lam=lam, kappa=kappa, output_bound=output_bound)
    m = dec.m
    f_lambda = compute_f_lambda(dec, target.f_rho, lam)
    noise = NoiseSpec(sigma=noise_sigma, bound=output_bound)
    root_m = math.sqrt(m)
    return FLambdaDiagnostics(
        lam=float(lam),
        k_norm=float(np.linalg.norm(f_lambda_coordinates(dec, target.f_rho, lam))),
        risk=expected_risk(target, noise, f_lambda),
        sup_norm=f_lambda.sup_norm(),
        k_norm_bound=root_m * output_bound / math.sqrt(lam),
        risk_bound=2.0 * m * output_bound ** 2,
        sup_norm_bound=kappa * root_m * output_bound / math.sqrt(lam),
    )


@dataclass(frozen=True)
class SamplingDiagnostics:
    """Deviation ``alpha`` and the per-sample ``||zeta_i||_K`` bounds.

    ``zeta_i = K(x_i, .)(y_i - f_lambda(x_i))``; both candidate per-sample
    bounds ``m kappa (M + ||f_lambda||_inf)`` and
    ``m kappa^2 (M + ||f_lambda||_inf)`` are reported.
    """

    alpha: float
    sampling_err_k: float
    scaled_bound: float
    max_zeta_norm: float
    zeta_bound_m_kappa: float
    zeta_bound_m_kappa_squared: float

    @property
    def holds(self) -> bool:
        return self.sampling_err_k <= self.scaled_bound + INVARIANT_SLACK

    @property
    def zeta_m_kappa_holds(self) -> bool:
        return self.max_zeta_norm <= self.zeta_bound_m_kappa * (1 + 1e-12)

    @property
    def zeta_m_kappa_squared_holds(self) -> bool:
        return self.max_zeta_norm <= self.zeta_bound_m_kappa_squared * (1 + 1e-12)


def sampling_deviation_diagnostics(
    sample: SampleSet,
    model: RidgeModel,
    f_lambda: RhoFunction,
    dec: SpectralDecomposition,
    lam: float,
    f_rho: Optional[RhoFunction] = None,
    kappa: Optional[float] = None,
) -> SamplingDiagnostics:
    """Compute ``alpha = ||(1/n) sum_i zeta_i - L_K(f_rho - f_lambda)||_K``.

    Checks ``||f_{z,lambda} - f_lambda||_K <= alpha / lambda``. Without
    ``f_rho`` the population term is taken as ``lambda f_lambda``, which
    equals ``L_K(f_rho - f_lambda)``.
    """
    _require_positive(lam=lam)
    space = dec.space
    indices = sample.node_indices if sample.node_indices is not None else space.indices_of(sample.points)
    if np.any(indices < 0) or np.any(indices >= space.size):
        raise ArgumentError("sample node index outside the space")
    n, m = sample.n, dec.m
    weights = space.weights[:, None]

    residual = sample.outputs - f_lambda.values[indices]
    empirical = np.zeros((space.size, m))
    np.add.at(empirical, indices, residual)
    empirical /= n

    if f_rho is not None:
        gap = (f_rho - f_lambda).values
        deviation = dec.kernel_coordinates_from_coefficients(empirical - weights * gap)
        f_lambda_coords = dec.kernel_coordinates_from_coefficients(weights * gap / lam)
    else:
        f_lambda_coords = dec.kernel_coordinates(f_lambda)
        deviation = dec.kernel_coordinates_from_coefficients(empirical) - lam * f_lambda_coords
    alpha = float(np.linalg.norm(deviation))

    model_coords = dec.kernel_coordinates_from_coefficients(node_coefficients(model, space))
    sampling_err_k = float(np.linalg.norm(model_coords - f_lambda_coords))

    blocks = dec.diagonal_blocks
    zeta_sq = np.einsum("ip,ipq,iq->i", residual, blocks[indices], residual)
    max_zeta = float(np.sqrt(max(float(np.max(zeta_sq)), 0.0)))
    if kappa is None:
        kappa = float(np.sqrt(np.max(np.abs(blocks))))
    output_bound = sample.bound if sample.bound is not None else float(np.max(np.abs(sample.outputs)))
    scale = output_bound + f_lambda.sup_norm()
    return SamplingDiagnostics(
        alpha=alpha,
        sampling_err_k=sampling_err_k,
        scaled_bound=alpha / lam,
        max_zeta_norm=max_zeta,
        zeta_bound_m_kappa=m * kappa * scale,
        zeta_bound_m_kappa_squared=m * kappa ** 2 * scale,
    )


def zeta_variance(dec: SpectralDecomposition, target: SourceTarget, noise: NoiseSpec, f_lambda: RhoFunction) -> float:
    """``E ||zeta||_K^2 = sum_k w_k [g_k^T K_kk g_k + (sigma^2 / 3) tr K_kk]`` with ``g = f_rho - f_lambda``."""
    gap = (target.f_rho - f_lambda).values
    blocks = dec.diagonal_blocks
    bias = np.einsum("kp,kpq,kq->k", gap, blocks, gap)
    noise_term = noise.variance * np.trace(blocks, axis1=1, axis2=2)
    return float(np.sum(dec.space.weights * (bias + noise_term)))


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantileSummary:
    median: float
    upper: float
    level: float


def quantile_summary(values: Sequence[float], delta: float) -> QuantileSummary:
    """Median and empirical ``(1 - delta)``-quantile, both as order statistics."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ArgumentError("cannot summarize an empty sample")
    level = 1.0 - delta
    return QuantileSummary(
        median=float(np.quantile(values, 0.5, method="inverted_cdf")),
        upper=float(np.quantile(values, level, method="inverted_cdf")),
        level=level,
    )


def fit_log_slope(pairs: Sequence[Tuple[float, float]]) -> float:
    """Least-squares slope of ``log(value)`` against ``log(x)``."""
    if len(pairs) < 2:
        raise ArgumentError(f"a slope needs at least two points, got {len(pairs)}")
    xs = np.array([pair[0] for pair in pairs], dtype=float)
    values = np.array([pair[1] for pair in pairs], dtype=float)
    if np.any(xs <= 0) or np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ArgumentError("log-log slopes need positive finite entries")
    if len(np.unique(xs)) < 2:
        raise ArgumentError("log-log slopes need at least two distinct abscissae")
    slope, _ = np.polyfit(np.log(xs), np.log(values), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# Rate experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRow:
    n: int
    m: int
    lam: float
    trial: int
    err_rho: float
    err_k: float
    sampling_err_k: float
    approx_err_k: float
    bound_rho: float
    bound_sampling_k: float
    bound_k: float
    bound_bennett: float
    alpha: float
    violated_rho: bool
    violated_sampling: bool
    violated_k: bool
    violated_bennett: bool
    triangle_holds: bool
    approx_holds: bool
    rho_vs_k_holds: bool
    model_norm_holds: bool
    scaling_holds: bool

    @property
    def invariants_hold(self) -> bool:
        return (
            self.triangle_holds
            and self.approx_holds
            and self.rho_vs_k_holds
            and self.model_norm_holds
            and self.scaling_holds
        )

    def csv_record(self) -> Dict[str, object]:
        return {
            "n": self.n,
            "m": self.m,
            "lambda": self.lam,
            "trial": self.trial,
            "err_rho": self.err_rho,
            "err_K": self.err_k,
            "sampling_err_K": self.sampling_err_k,
            "approx_err_K": self.approx_err_k,
            "bound_rho": self.bound_rho,
            "bound_sampling_K": self.bound_sampling_k,
            "violated_rho": int(self.violated_rho),
            "violated_sampling": int(self.violated_sampling),
        }


@dataclass(frozen=True)
class GridSummary:
    """Aggregates over the trials of one ``(n, m, lambda)`` grid point."""

    n: int
    m: int
    lam: float
    trials: int
    err_rho: QuantileSummary
    err_k: QuantileSummary
    sampling_err_k: QuantileSummary
    bound_rho: float
    bound_sampling_k: float
    bound_k: float
    violation_rho: float
    violation_sampling: float
    violation_k: float
    violation_bennett: float
    invariant_failures: int

    @property
    def bound_dominates(self) -> bool:
        return self.err_rho.upper <= self.bound_rho

    def to_dict(self) -> Dict[str, object]:
        return {
            "n": self.n,
            "m": self.m,
            "lambda": self.lam,
            "trials": self.trials,
            "err_rho": vars(self.err_rho),
            "err_K": vars(self.err_k),
            "sampling_err_K": vars(self.sampling_err_k),
            "bound_rho": self.bound_rho,
            "bound_sampling_K": self.bound_sampling_k,
            "bound_K": self.bound_k,
            "violation_fraction": {
                "rho": self.violation_rho,
                "sampling": self.violation_sampling,
                "K": self.violation_k,
                "bennett": self.violation_bennett,
            },
            "invariant_failures": self.invariant_failures,
            "bound_dominates": self.bound_dominates,
        }


@dataclass(frozen=True)
class SlopeFit:
    """Fitted log-log slope of an error statistic next to the bound's slope."""

    key: str
    axis: str
    statistic: str
    slope: float
    bound_slope: float
    points: int

    @property
    def within_bound(self) -> bool:
        return self.slope <= self.bound_slope + SLOPE_SLACK

    def to_dict(self) -> Dict[str, object]:
        record = dict(vars(self))
        record["within_bound"] = self.within_bound
        return record


@dataclass
class RateReport:
    config: RateExperimentConfig
    rows: List[TrialRow]
    summaries: List[GridSummary]
    slopes: List[SlopeFit]
    kappa: Dict[int, float]
    source_norm: Dict[int, float]
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        """Violation fractions within ``delta`` and every exact invariant satisfied."""
        delta = self.config.delta
        return all(
            summary.violation_rho <= delta
            and summary.violation_sampling <= delta
            and summary.invariant_failures == 0
            for summary in self.summaries
        )

    def to_summary(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "delta": self.config.delta,
            "r": self.config.r,
            "trials": self.config.trials,
            "seed": self.config.seed,
            "lambda_rule": self.config.lambda_rule.rule,
            "kappa": {str(m): value for m, value in self.kappa.items()},
            "source_norm": {str(m): value for m, value in self.source_norm.items()},
            "grid": [summary.to_dict() for summary in self.summaries],
            "slopes": [slope.to_dict() for slope in self.slopes],
        }


@dataclass(frozen=True, eq=False)
class _TaskContext:
    """Everything shared by the trials of one task count."""

    m: int
    kernel: MatrixKernel
    dec: SpectralDecomposition
    target: SourceTarget
    noise: NoiseSpec
    kappa: float


@dataclass(frozen=True, eq=False)
class _GridPoint:
    """Per ``(n, m, lambda)`` quantities computed once before the trials."""

    context: _TaskContext
    n: int
    lam: float
    f_lambda: RhoFunction
    approximation: ApproximationError
    bound_rho: float
    bound_sampling_k: float
    bound_k: float
    bound_bennett: float


def resolve_lambdas(rule: LambdaRule, n: int, m: int, r: float, kappa: float, output_bound: float, nu: float) -> List[float]:
    if rule.rule == "optimal":
        return [lambda_rule(n, m, r, kappa, output_bound, nu)]
    if rule.rule == "fixed":
        return [float(rule.value)]
    return [float(value) for value in rule.values]


def _build_context(config: RateExperimentConfig, space, m: int) -> _TaskContext:
    kernel = build_kernel(config.kernel, m, space)
    universality = check_universal_on_discrete(kernel, space)
    if not universality.universal:
        raise HypothesisViolation(
            "universal kernel",
            f"kernel is not universal on the space for m = {m}: "
            f"min Gram eigenvalue {universality.min_eigenvalue:.3e} <= {universality.threshold:.3e}",
        )
    dec = eigendecompose(kernel, space)
    # Populate cached views before trials share them across threads.
    _ = dec.eigenfunction_matrix, dec.diagonal_blocks
    noise = NoiseSpec(sigma=config.sigma, bound=config.bound)
    target = build_source_target(
        dec,
        config.r,
        seed=target_seed(config.seed, m),
        modes=config.target_modes,
        sup_norm_budget=noise.target_budget(),
    )
    kappa = kappa_estimate(kernel, space.nodes)
    logger.info("task_context_ready", m=m, kappa=kappa, nu=target.source_norm, rank=dec.rank)
    return _TaskContext(m=m, kernel=kernel, dec=dec, target=target, noise=noise, kappa=kappa)


def _build_grid_point(config: RateExperimentConfig, context: _TaskContext, n: int, lam: float) -> _GridPoint:
    dec, target, m, kappa = context.dec, context.target, context.m, context.kappa
    nu = target.source_norm
    f_lambda = compute_f_lambda(dec, target.f_rho, lam)
    approximation = approximation_error(
        dec, target.f_rho, lam, config.r, nu, source_coefficients=target.coefficients
    )
    if config.lambda_rule.rule == "optimal":
        bound_rho = theoretical_rate_bound(n, m, config.r, kappa, config.bound, nu, config.delta)
        bound_k = k_norm_rate_bound(n, m, config.r, kappa, config.bound, nu, config.delta)
    else:
        bound_rho = rho_error_bound(n, m, lam, config.r, kappa, config.bound, nu, config.delta)
        bound_k = total_error_bound(n, m, lam, config.r, kappa, config.bound, nu, config.delta)
    m_tilde = m * kappa * (config.bound + f_lambda.sup_norm())
    variance = zeta_variance(dec, target, context.noise, f_lambda)
    return _GridPoint(
        context=context,
        n=n,
        lam=lam,
        f_lambda=f_lambda,
        approximation=approximation,
        bound_rho=bound_rho,
        bound_sampling_k=sampling_error_bound(n, m, lam, kappa, config.bound, config.delta),
        bound_k=bound_k,
        bound_bennett=bennett_bound(m_tilde, variance, n, config.delta),
    )


def _run_trial(config: RateExperimentConfig, point: _GridPoint, trial: int) -> TrialRow:
    context = point.context
    dec, target, m = context.dec, context.target, context.m
    space = dec.space
    n, lam = point.n, point.lam

    sample = sample_dataset(target, context.noise, n, trial_seed(config.seed, n, m, trial))
    model = solve_regularization_network(context.kernel, sample, lam, space=space, method=config.solve_method)
    coefficients = node_coefficients(model, space)
    model_values = RhoFunction.from_vector(space, dec.gram @ coefficients.reshape(-1), m)
    model_coords = dec.kernel_coordinates_from_coefficients(coefficients)

    err_rho = (model_values - target.f_rho).norm()
    err_k = float(np.linalg.norm(model_coords - target.kernel_coordinates))
    diagnostics = sampling_deviation_diagnostics(
        sample, model, point.f_lambda, dec, lam, f_rho=target.f_rho, kappa=context.kappa
    )
    sampling_err_k = diagnostics.sampling_err_k
    approx_err_k = point.approximation.err_k

    return TrialRow(
        n=n,
        m=m,
        lam=lam,
        trial=trial,
        err_rho=err_rho,
        err_k=err_k,
        sampling_err_k=sampling_err_k,
        approx_err_k=approx_err_k,
        bound_rho=point.bound_rho,
        bound_sampling_k=point.bound_sampling_k,
        bound_k=point.bound_k,
        bound_bennett=point.bound_bennett,
        alpha=diagnostics.alpha,
        violated_rho=err_rho > point.bound_rho,
        violated_sampling=sampling_err_k > point.bound_sampling_k,
        violated_k=err_k > point.bound_k,
        violated_bennett=diagnostics.alpha > point.bound_bennett,
        triangle_holds=err_k <= sampling_err_k + approx_err_k + INVARIANT_SLACK,
        approx_holds=point.approximation.holds,
        rho_vs_k_holds=err_rho <= context.kappa * math.sqrt(m) * err_k + INVARIANT_SLACK,
        model_norm_holds=float(np.linalg.norm(model_coords)) <= math.sqrt(m) * config.bound / math.sqrt(lam) + INVARIANT_SLACK,
        scaling_holds=diagnostics.holds,
    )


def summarize_grid_point(rows: Sequence[TrialRow], delta: float) -> GridSummary:
    first = rows[0]
    count = len(rows)
    return GridSummary(
        n=first.n,
        m=first.m,
        lam=first.lam,
        trials=count,
        err_rho=quantile_summary([row.err_rho for row in rows], delta),
        err_k=quantile_summary([row.err_k for row in rows], delta),
        sampling_err_k=quantile_summary([row.sampling_err_k for row in rows], delta),
        bound_rho=first.bound_rho,
        bound_sampling_k=first.bound_sampling_k,
        bound_k=first.bound_k,
        violation_rho=sum(row.violated_rho for row in rows) / count,
        violation_sampling=sum(row.violated_sampling for row in rows) / count,
        violation_k=sum(row.violated_k for row in rows) / count,
        violation_bennett=sum(row.violated_bennett for row in rows) / count,
        invariant_failures=sum(not row.invariants_hold for row in rows),
    )


def _series_key(summary: GridSummary, rule: str, axis: str) -> str:
    fixed = f"n={summary.n}" if axis == "m" else f"m={summary.m}"
    return fixed if rule == "optimal" else f"{fixed},lambda={summary.lam!r}"


def fit_rate_slopes(summaries: Sequence[GridSummary], rule: str) -> List[SlopeFit]:
    """Slopes of the error quantiles in ``n`` (per ``m``) and in ``m`` (per ``n``)."""
    fits = []
    for axis in ("n", "m"):
        series: Dict[str, List[GridSummary]] = {}
        for summary in summaries:
            series.setdefault(_series_key(summary, rule, axis), []).append(summary)
        for key, members in series.items():
            xs = [getattr(member, axis) for member in members]
            if len(set(xs)) < 2:
                continue
            bound_slope = fit_log_slope([(x, member.bound_rho) for x, member in zip(xs, members)])
            for statistic in ("upper", "median"):
                values = [getattr(member.err_rho, statistic) for member in members]
                if min(values) <= 0:
                    continue
                fits.append(
                    SlopeFit(
                        key=key,
                        axis=axis,
                        statistic=statistic,
                        slope=fit_log_slope(list(zip(xs, values))),
                        bound_slope=bound_slope,
                        points=len(members),
                    )
                )
    return fits


def run_rate_experiment(config: RateExperimentConfig, workers: int = 1) -> RateReport:
    """Monte Carlo check of the learning-rate bounds over the ``(n, m)`` grid.

    Rows are ordered by ``(n, m, lambda, trial)``; each trial draws from its
    own substream so the report is identical for any worker count.

    Raises:
        HypothesisViolation: For a non-universal kernel, ``kappa < 1`` or
            ``log(2/delta) < 1``.
    """
    started = time.perf_counter()
    log_confidence(config.delta)
    space = build_space(config.space)
    contexts = {m: _build_context(config, space, m) for m in dict.fromkeys(config.m_grid)}

    points: List[_GridPoint] = []
    for n in dict.fromkeys(config.n_grid):
        for m, context in contexts.items():
            lambdas = resolve_lambdas(
                config.lambda_rule, n, m, config.r, context.kappa, config.bound, context.target.source_norm
            )
            points.extend(_build_grid_point(config, context, n, lam) for lam in lambdas)

    tasks = [(point, trial) for point in points for trial in range(config.trials)]
    logger.info("rate_experiment_started", grid_points=len(points), trials=len(tasks), workers=workers)

    def run(task):
        return _run_trial(config, *task)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, tasks))
    else:
        rows = [run(task) for task in tasks]

    summaries = []
    for _, group in groupby(rows, key=lambda row: (row.n, row.m, row.lam)):
        summary = summarize_grid_point(list(group), config.delta)
        summaries.append(summary)
        logger.info(
            "grid_point_done",
            n=summary.n,
            m=summary.m,
            lambda_=summary.lam,
            median_err_rho=summary.err_rho.median,
            violation_rho=summary.violation_rho,
            violation_sampling=summary.violation_sampling,
        )

    report = RateReport(
        config=config,
        rows=rows,
        summaries=summaries,
        slopes=fit_rate_slopes(summaries, config.lambda_rule.rule),
        kappa={m: context.kappa for m, context in contexts.items()},
        source_norm={m: context.target.source_norm for m, context in contexts.items()},
        elapsed_seconds=time.perf_counter() - started,
    )
    logger.info("rate_experiment_finished", passed=report.passed, seconds=round(report.elapsed_seconds, 3))
    return report


# ---------------------------------------------------------------------------
# Approximation sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApproximationRow:
    r: float
    lam: float
    target: int
    err_k: float
    bound: float

    @property
    def violated(self) -> bool:
        return self.err_k > self.bound + 1e-12


def approximation_sweep(
    dec: SpectralDecomposition,
    r_values: Sequence[float],
    lambdas: Sequence[float],
    targets: int,
    seed: int,
    modes: Optional[int] = None,
) -> List[ApproximationRow]:
    """``||f_lambda - f_rho||_K`` against ``lambda^{r - 1/2} nu`` over ``r x lambda x targets``.

    Target ``t`` uses the same drawn source coefficients for every ``r``.
    """
    if targets < 1:
        raise ArgumentError(f"the sweep needs at least one target, got {targets}")
    rows = []
    for index in range(targets):
        for r in r_values:
            target = build_source_target(dec, r, seed=sweep_seed(seed, index), modes=modes)
            for lam in lambdas:
                result = approximation_error(
                    dec, target.f_rho, lam, r, target.source_norm, source_coefficients=target.coefficients
                )
                rows.append(ApproximationRow(r=float(r), lam=float(lam), target=index, err_k=result.err_k, bound=result.bound))
    rows.sort(key=lambda row: (row.r, row.lam, row.target))
    return rows
