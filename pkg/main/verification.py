"""
Multi-task Regularization Networks - Identity Verification Suite
================================================================

Runs the exact finite-space identities for one kernel/space config and
records the measured discrepancy of each:

- kernel symmetry and positive semidefiniteness of the block Gram
- reproducing identity ``<f, K(x, .) xi>_K = xi^T f(x)``
- coefficient route vs operator route of the regularization network
- Mercer reconstruction of every kernel block
- norm identity ``||L_K^{1/2} f||_K = ||P_Phi f||_rho`` and the Gram-route K-norm
- spectral ``f_lambda`` vs direct quadratic minimization
- excess-risk identity ``E(f) - E(f_rho) = ||f - f_rho||_rho^2``
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import structlog
from scipy import linalg

from main.config_manager import ExperimentConfig, build_kernel, build_space
from main.exceptions import ArgumentError
from main.kernels import MatrixKernel, check_universal_on_discrete
from main.rkhs import RidgeModel, SampleSet, inner_product, node_coefficients, rkhs_norm, verify_representer_identity
from main.spectral import (
    DiscreteSpace,
    RhoFunction,
    SpectralDecomposition,
    apply_fractional_power,
    compute_f_lambda,
    eigendecompose,
    mercer_reconstruct,
    rkhs_norm_via_space,
)
from main.synth import NoiseSpec, build_source_target, excess_risk_check, make_generator
from utils.linalg import min_eigenvalue

logger = structlog.get_logger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    discrepancy: float
    tolerance: float
    detail: str = ""

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "passed": self.passed,
            "discrepancy": self.discrepancy,
            "tolerance": self.tolerance,
            "detail": self.detail,
        }


@dataclass
class VerificationReport:
    m: int
    nodes: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def max_discrepancy(self) -> float:
        return max((check.discrepancy for check in self.checks), default=0.0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "passed": self.passed,
            "m": self.m,
            "nodes": self.nodes,
            "max_discrepancy": self.max_discrepancy,
            "checks": [check.to_dict() for check in self.checks],
        }


def _relative(value: float, scale: float) -> float:
    return value / max(scale, 1e-300)


class IdentityVerifier:
    """Runs every identity check against one kernel on one discrete space."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.tolerances = config.tolerances
        self.section = config.verify
        self.space: DiscreteSpace = build_space(config.space)
        self.kernel: MatrixKernel = build_kernel(config.kernel, config.m, self.space)
        self.rng = make_generator(config.seed)
        self._dec: Optional[SpectralDecomposition] = None

    @property
    def dec(self) -> SpectralDecomposition:
        if self._dec is None:
            self._dec = eigendecompose(self.kernel, self.space)
        return self._dec

    def run(self) -> VerificationReport:
        report = VerificationReport(m=self.kernel.m, nodes=self.space.size)
        checks: List[Callable[[], CheckResult]] = [
            self.check_symmetry,
            self.check_positive_semidefinite,
            self.check_reproducing_identity,
            self.check_representer_identity,
            self.check_mercer_reconstruction,
            self.check_norm_identity,
            self.check_f_lambda_equivalence,
            self.check_excess_risk_identity,
        ]
        for check in checks:
            result = check()
            report.checks.append(result)
            log = logger.info if result.passed else logger.warning
            log("check_finished", check=result.name, passed=result.passed, discrepancy=result.discrepancy)
        return report

    # -- helpers -----------------------------------------------------------

    def _random_function(self) -> RhoFunction:
        return RhoFunction(self.space, self.rng.standard_normal((self.space.size, self.kernel.m)))

    def _random_model(self, anchors: int) -> RidgeModel:
        indices = self.rng.integers(0, self.space.size, size=anchors)
        coefficients = self.rng.standard_normal((anchors, self.kernel.m))
        return RidgeModel(self.space.nodes[indices], coefficients, self.kernel, 1.0, indices)

    def _gram(self) -> np.ndarray:
        gram = np.array(self.kernel.block_gram(self.space.nodes, self.space.nodes))
        entry = self.section.fault_injection.flip_gram_entry
        if entry is not None:
            if max(entry) >= gram.shape[0] or min(entry) < 0:
                raise ArgumentError(f"flipped Gram entry {tuple(entry)} outside a {gram.shape[0]}x{gram.shape[0]} Gram")
            logger.warning("fault_injected", entry=list(entry))
            gram[entry[0], entry[1]] += 1.0
        return gram

    # -- checks ------------------------------------------------------------

    def check_symmetry(self) -> CheckResult:
        gram = self._gram()
        scale = float(np.max(np.abs(gram)))
        asymmetry = _relative(float(np.max(np.abs(gram - gram.T))), scale)
        tolerance = self.tolerances.symmetry
        return CheckResult("kernel_symmetry", asymmetry <= tolerance, asymmetry, tolerance)

    def check_positive_semidefinite(self) -> CheckResult:
        gram = self._gram()
        scale = float(np.max(np.abs(np.diag(gram))))
        smallest = min_eigenvalue(gram)
        deficit = _relative(max(-smallest, 0.0), scale)
        universality = check_universal_on_discrete(self.kernel, self.space)
        detail = f"min eigenvalue {smallest:.6e}; universal={universality.universal}"
        tolerance = self.tolerances.psd
        return CheckResult("kernel_psd", deficit <= tolerance, deficit, tolerance, detail)

    def check_reproducing_identity(self) -> CheckResult:
        worst = 0.0
        for _ in range(self.section.instances):
            model = self._random_model(anchors=max(self.section.sample_size, 1))
            index = int(self.rng.integers(0, self.space.size))
            xi = self.rng.standard_normal(self.kernel.m)
            section = RidgeModel(self.space.nodes[[index]], xi[None, :], self.kernel, 1.0, np.array([index]))
            lhs = inner_product(model, section)
            rhs = float(xi @ model.evaluate(self.space.nodes[index]))
            worst = max(worst, _relative(abs(lhs - rhs), max(abs(rhs), 1.0)))
        tolerance = self.tolerances.identity
        return CheckResult("reproducing_identity", worst <= tolerance, worst, tolerance)

    def check_representer_identity(self) -> CheckResult:
        worst = 0.0
        for _ in range(self.section.instances):
            indices = self.rng.integers(0, self.space.size, size=self.section.sample_size)
            outputs = self.rng.uniform(-1.0, 1.0, size=(self.section.sample_size, self.kernel.m))
            sample = SampleSet(self.space.nodes[indices], outputs, indices)
            worst = max(worst, verify_representer_identity(self.kernel, sample, self.section.lam, self.space))
        tolerance = self.tolerances.identity
        return CheckResult("representer_identity", worst <= tolerance, worst, tolerance)

    def check_mercer_reconstruction(self) -> CheckResult:
        dec = self.dec
        size, m = self.space.size, self.kernel.m
        full = dec.eigenfunction_matrix[:, : dec.rank] * dec.retained_eigenvalues
        reconstructed = full @ dec.eigenfunction_matrix[:, : dec.rank].T
        # spot check the per-pair entry point against the vectorized form
        corner = mercer_reconstruct(dec, size - 1, 0)
        reconstructed_corner = reconstructed[(size - 1) * m: size * m, :m]
        gram = dec.gram
        scale = float(np.max(np.abs(gram)))
        error = max(
            float(np.max(np.abs(reconstructed - gram))),
            float(np.max(np.abs(corner - reconstructed_corner))),
        )
        discrepancy = _relative(error, scale)
        tolerance = self.tolerances.identity
        return CheckResult("mercer_reconstruction", discrepancy <= tolerance, discrepancy, tolerance, f"rank {dec.rank}")

    def check_norm_identity(self) -> CheckResult:
        dec = self.dec
        worst = 0.0
        for _ in range(self.section.instances):
            f = self._random_function()
            half = apply_fractional_power(dec, 0.5, f)
            lhs = rkhs_norm_via_space(self.kernel, self.space, half, dec=dec)
            projected, _ = dec.projection(f)
            rhs = projected.norm()
            worst = max(worst, _relative(abs(lhs - rhs), max(rhs, 1.0)))

            model = self._random_model(anchors=self.space.size)
            values = RhoFunction(self.space, model.evaluate_many(self.space.nodes))
            gram_route = rkhs_norm(model)
            spectral_route = float(np.linalg.norm(dec.kernel_coordinates_from_coefficients(node_coefficients(model, self.space))))
            worst = max(worst, _relative(abs(gram_route - spectral_route), max(gram_route, 1.0)))
            if dec.rank == dec.eigenvalues.size:
                division_route = rkhs_norm_via_space(self.kernel, self.space, values, dec=dec)
                worst = max(worst, _relative(abs(gram_route - division_route), max(gram_route, 1.0)))
        tolerance = self.tolerances.identity
        return CheckResult("norm_identity", worst <= tolerance, worst, tolerance, f"rank {dec.rank}")

    def check_f_lambda_equivalence(self) -> CheckResult:
        dec = self.dec
        weights = self.space.flat_weights(self.kernel.m)
        gram = dec.gram
        worst = 0.0
        for _ in range(self.section.instances):
            target = build_source_target(dec, self.section.r, seed=self.rng.integers(0, 2 ** 32))
            for lam in self.section.lambdas:
                spectral = compute_f_lambda(dec, target.f_rho, lam)
                # f = G C with (W G + lambda I) C = W f_rho minimizes ||f - f_rho||_rho^2 + lambda ||f||_K^2
                coefficients = linalg.solve(weights[:, None] * gram + lam * np.eye(gram.shape[0]), weights * target.f_rho.vector)
                direct = gram @ coefficients
                scale = max(float(np.max(np.abs(target.f_rho.values))), 1.0)
                worst = max(worst, _relative(float(np.max(np.abs(spectral.vector - direct))), scale))
        tolerance = self.tolerances.identity
        return CheckResult("f_lambda_equivalence", worst <= tolerance, worst, tolerance)

    def check_excess_risk_identity(self) -> CheckResult:
        dec = self.dec
        noise = NoiseSpec(sigma=self.section.sigma, bound=1.0)
        worst = 0.0
        for _ in range(self.section.instances):
            target = build_source_target(dec, self.section.r, seed=self.rng.integers(0, 2 ** 32))
            f = self._random_function()
            result = excess_risk_check(target, noise, f)
            scale = max(result.lhs, result.rhs, target.m * noise.variance, 1.0)
            worst = max(worst, _relative(result.gap, scale))
        tolerance = self.tolerances.excess_risk
        return CheckResult("excess_risk_identity", worst <= tolerance, worst, tolerance)


def run_verification(config: ExperimentConfig) -> VerificationReport:
    return IdentityVerifier(config).run()
