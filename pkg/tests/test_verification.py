"""Tests for the identity verification suite."""

import pytest

from main.config_manager import ExperimentConfig
from main.exceptions import ArgumentError
from main.verification import IdentityVerifier, run_verification

CHECK_NAMES = [
    "kernel_symmetry",
    "kernel_psd",
    "reproducing_identity",
    "representer_identity",
    "mercer_reconstruction",
    "norm_identity",
    "f_lambda_equivalence",
    "excess_risk_identity",
]


def _config(coupling=None, **overrides) -> ExperimentConfig:
    document = {
        "kernel": {
            "variant": "separable",
            "scalar": {"variant": "gaussian", "width": 0.3},
            "coupling": coupling or {"family": "equicorrelated", "correlation": 0.4},
        },
        "space": {"kind": "grid", "count": 6},
        "m": 2,
        "seed": 4,
        "verify": {"instances": 4, "sample_size": 3},
    }
    document.update(overrides)
    return ExperimentConfig.model_validate(document)


class TestVerificationSuite:
    """Test the full run and the report layout."""

    def test_universal_kernel_passes(self):
        report = run_verification(_config())
        assert [check.name for check in report.checks] == CHECK_NAMES
        assert report.passed, [check.to_dict() for check in report.checks if not check.passed]
        assert report.nodes == 6
        assert report.m == 2

    def test_rank_deficient_kernel_passes(self):
        """Test that a rank-one coupling still satisfies every identity."""
        report = run_verification(_config(coupling=[[1.0, 1.0], [1.0, 1.0]]))
        assert report.passed
        details = {check.name: check.detail for check in report.checks}
        assert details["mercer_reconstruction"] == "rank 6"

    def test_diagonal_kernel_passes(self):
        kernel = {
            "variant": "diagonal",
            "scalars": [{"variant": "gaussian", "width": 0.2}, {"variant": "gaussian", "width": 0.5}],
        }
        assert run_verification(_config(kernel=kernel)).passed

    def test_report_dict(self):
        document = run_verification(_config()).to_dict()
        assert set(document) == {"passed", "m", "nodes", "max_discrepancy", "checks"}
        assert document["max_discrepancy"] == max(check["discrepancy"] for check in document["checks"])

    def test_same_seed_same_report(self):
        first = run_verification(_config()).to_dict()
        second = run_verification(_config()).to_dict()
        assert first == second


class TestFaultInjection:
    """Test the flipped Gram entry hook."""

    def test_flip_breaks_symmetry_only(self):
        config = _config(verify={"instances": 2, "fault_injection": {"flip_gram_entry": [0, 3]}})
        verifier = IdentityVerifier(config)
        assert not verifier.check_symmetry().passed
        assert verifier.check_mercer_reconstruction().passed

    def test_flip_outside_gram(self):
        """Test that the flipped entry must address the block Gram."""
        config = _config(verify={"fault_injection": {"flip_gram_entry": [0, 12]}})
        with pytest.raises(ArgumentError):
            IdentityVerifier(config).check_symmetry()
