"""Tests for synthetic targets, noisy datasets and dataset files."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from main.exceptions import ArgumentError, PreconditionError
from main.kernels import CouplingMatrix, GaussianScalarKernel, LookupMatrixKernel, SeparableKernel
from main.rkhs import SampleSet
from main.spectral import DiscreteSpace, RhoFunction, eigendecompose, rkhs_norm_via_space
from main.synth import (
    NoiseSpec,
    build_source_target,
    excess_risk_check,
    expected_risk,
    read_dataset_csv,
    sample_dataset,
    trial_seed,
    write_dataset_csv,
)


@pytest.fixture
def two_mode_dec():
    """Two nodes, uniform weights and eigenvalues 1 and 0.25."""
    space = DiscreteSpace.uniform([0.0, 1.0])
    blocks = np.zeros((2, 2, 1, 1))
    blocks[0, 0, 0, 0] = 2.0
    blocks[1, 1, 0, 0] = 0.5
    return eigendecompose(LookupMatrixKernel(space.nodes, blocks), space)


@pytest.fixture
def dec():
    space = DiscreteSpace.uniform(np.linspace(0.0, 1.0, 8))
    kernel = SeparableKernel(GaussianScalarKernel(width=0.25), CouplingMatrix.equicorrelated(2, 0.5))
    return eigendecompose(kernel, space)


class TestSourceTarget:
    """Test source-condition targets."""

    def test_source_norm(self, two_mode_dec):
        """Test nu = ||d||_2 for d = (3, 4)."""
        target = build_source_target(two_mode_dec, 1.0, coefficients=[3.0, 4.0])
        assert target.source_norm == pytest.approx(5.0)

    def test_kernel_norm(self, two_mode_dec):
        """Test ||f_rho||_K = sqrt(1 + 0.25) for d = (1, 1), r = 1."""
        assert_allclose(two_mode_dec.eigenvalues, [1.0, 0.25])
        target = build_source_target(two_mode_dec, 1.0, coefficients=[1.0, 1.0])
        assert target.k_norm == pytest.approx(np.sqrt(1.25))

    def test_values_follow_source_condition(self, two_mode_dec):
        """Test <f_rho, phi_j>_rho = d_j lambda_j^r."""
        target = build_source_target(two_mode_dec, 0.75, coefficients=[0.5, -1.0])
        coefficients = two_mode_dec.coefficients(target.f_rho)
        assert_allclose(coefficients, [0.5, -1.0 * 0.25 ** 0.75], atol=1e-14)

    def test_sup_norm_budget(self, dec):
        """Test that a drawn target is rescaled to the requested sup norm."""
        target = build_source_target(dec, 1.0, seed=3, modes=2, sup_norm_budget=0.7)
        assert target.sup_norm == pytest.approx(0.7)
        assert target.coefficients.shape == (2,)

    def test_seeded_draw_is_reproducible(self, dec):
        """Test that the same seed draws the same coefficients."""
        first = build_source_target(dec, 1.0, seed=5)
        second = build_source_target(dec, 1.0, seed=5)
        assert_array_equal(first.coefficients, second.coefficients)
        assert len(first.coefficients) == dec.rank

    def test_rebuild(self, dec):
        """Test that the stored coefficients reproduce the target."""
        target = build_source_target(dec, 0.6, seed=9, modes=4)
        assert_allclose(target.rebuild().f_rho.values, target.f_rho.values, rtol=0, atol=0)

    @pytest.mark.parametrize("r", [0.6, 0.75, 1.0])
    def test_kernel_norm_matches_node_values(self, dec, r):
        """Test ||f_rho||_K = sqrt(sum_j d_j^2 lambda_j^(2r - 1)) against the node-value route."""
        target = build_source_target(dec, r, seed=12, modes=5)
        eigenvalues = dec.eigenvalues[:5]
        expected = np.sqrt(np.sum(target.coefficients ** 2 * eigenvalues ** (2 * r - 1)))
        assert target.k_norm == pytest.approx(expected, rel=1e-9)
        kernel = SeparableKernel(GaussianScalarKernel(width=0.25), CouplingMatrix.equicorrelated(2, 0.5))
        assert rkhs_norm_via_space(kernel, dec.space, target.f_rho) == pytest.approx(expected, rel=1e-9)

    @pytest.mark.parametrize("r", [0.5, 1.2])
    def test_rejects_smoothness_outside_range(self, two_mode_dec, r):
        """Test that r must lie in (1/2, 1]."""
        with pytest.raises(ArgumentError):
            build_source_target(two_mode_dec, r, coefficients=[1.0])

    def test_rejects_too_many_modes(self, two_mode_dec):
        """Test that modes beyond the numerical rank are refused."""
        with pytest.raises(ArgumentError):
            build_source_target(two_mode_dec, 1.0, seed=1, modes=3)
        with pytest.raises(ArgumentError):
            build_source_target(two_mode_dec, 1.0, coefficients=[1.0, 1.0, 1.0])

    def test_needs_coefficients_or_seed(self, two_mode_dec):
        """Test that a target needs a source of coefficients."""
        with pytest.raises(ArgumentError):
            build_source_target(two_mode_dec, 1.0)


class TestSampling:
    """Test noisy sample draws."""

    def test_noiseless_outputs(self, dec):
        """Test that sigma = 0 returns y_i = f_rho(x_i) exactly."""
        target = build_source_target(dec, 1.0, seed=1, sup_norm_budget=0.5)
        sample = sample_dataset(target, NoiseSpec(sigma=0.0, bound=1.0), 50, seed=2)
        assert_array_equal(sample.outputs, target.f_rho.values[sample.node_indices])
        assert_array_equal(sample.points, dec.space.nodes[sample.node_indices])

    def test_outputs_bounded(self, dec):
        """Test ||y_i||_inf <= M."""
        noise = NoiseSpec(sigma=0.2, bound=1.0)
        target = build_source_target(dec, 1.0, seed=1, sup_norm_budget=noise.target_budget())
        sample = sample_dataset(target, noise, 500, seed=3)
        assert np.max(np.abs(sample.outputs)) <= 1.0
        assert sample.bound == 1.0

    def test_noise_mean_at_fixed_node(self, dec):
        """Test that the mean output at a node approaches f_rho there."""
        noise = NoiseSpec(sigma=0.3, bound=1.0)
        target = build_source_target(dec, 1.0, seed=6, sup_norm_budget=noise.target_budget())
        sample = sample_dataset(target, noise, 100_000, seed=11)
        node = 3
        outputs = sample.outputs[sample.node_indices == node]
        standard_error = noise.sigma / np.sqrt(3 * len(outputs))
        assert np.all(np.abs(outputs.mean(axis=0) - target.f_rho.values[node]) <= 4 * standard_error)

    @pytest.mark.parametrize("seed", range(5))
    def test_all_outputs_bounded(self, dec, seed):
        """Test ||y_i||_inf <= M and ||f_rho||_rho <= sqrt(m) M over several targets."""
        noise = NoiseSpec(sigma=0.25, bound=2.0)
        target = build_source_target(dec, 0.75, seed=seed, sup_norm_budget=noise.target_budget())
        sample = sample_dataset(target, noise, 2_000, seed=100 + seed)
        assert np.max(np.abs(sample.outputs)) <= noise.bound
        assert target.f_rho.norm() <= np.sqrt(2) * noise.bound

    def test_trial_streams(self, dec):
        """Test that a trial seed reproduces its sample and other trials differ."""
        noise = NoiseSpec(sigma=0.1, bound=1.0)
        target = build_source_target(dec, 1.0, seed=1, sup_norm_budget=0.5)
        first = sample_dataset(target, noise, 20, trial_seed(7, 20, 2, 0))
        again = sample_dataset(target, noise, 20, trial_seed(7, 20, 2, 0))
        other = sample_dataset(target, noise, 20, trial_seed(7, 20, 2, 1))
        assert_array_equal(first.outputs, again.outputs)
        assert not np.array_equal(first.outputs, other.outputs)

    def test_precondition(self, dec):
        """Test that a target too large for the output bound is refused."""
        target = build_source_target(dec, 1.0, seed=1, sup_norm_budget=0.95)
        with pytest.raises(PreconditionError):
            sample_dataset(target, NoiseSpec(sigma=0.1, bound=1.0), 10, seed=0)


class TestRisk:
    """Test expected risk and the excess-risk identity."""

    def test_risk_of_target_is_noise_variance(self, dec):
        """Test E(f_rho) = m sigma^2 / 3."""
        target = build_source_target(dec, 1.0, seed=4, sup_norm_budget=0.5)
        noise = NoiseSpec(sigma=0.3, bound=1.0)
        assert expected_risk(target, noise, target.f_rho) == pytest.approx(2 * 0.09 / 3)

    def test_excess_risk_identity(self, dec):
        """Test E(f) - E(f_rho) = ||f - f_rho||_rho^2 for random f."""
        target = build_source_target(dec, 1.0, seed=4, sup_norm_budget=0.5)
        noise = NoiseSpec(sigma=0.3, bound=1.0)
        rng = np.random.default_rng(8)
        for _ in range(20):
            f = RhoFunction(dec.space, rng.standard_normal((dec.space.size, 2)))
            assert excess_risk_check(target, noise, f).gap <= 1e-12 * max(1.0, f.norm() ** 2)


class TestDatasetFiles:
    """Test the dataset CSV format."""

    def test_round_trip(self, dec, tmp_path):
        """Test that written samples read back bit-identically."""
        noise = NoiseSpec(sigma=0.1, bound=1.0)
        target = build_source_target(dec, 1.0, seed=1, sup_norm_budget=0.5)
        datasets = {trial: sample_dataset(target, noise, 7, seed=trial) for trial in range(3)}
        path = write_dataset_csv(tmp_path / "data.csv", datasets)
        restored = read_dataset_csv(path, dec.space, bound=1.0)
        assert sorted(restored) == [0, 1, 2]
        for trial, sample in datasets.items():
            assert_array_equal(restored[trial].outputs, sample.outputs)
            assert_array_equal(restored[trial].node_indices, sample.node_indices)

    def test_write_needs_node_indices(self, tmp_path):
        """Test that samples without node indices cannot be exported."""
        with pytest.raises(ArgumentError):
            write_dataset_csv(tmp_path / "data.csv", {0: SampleSet([0.0], [1.0])})

    def test_malformed_row(self, dec, tmp_path):
        """Test that a non-numeric output names its data row."""
        path = tmp_path / "data.csv"
        path.write_text("trial,i,node_index,y_1,y_2\n0,0,1,0.5,0.5\n0,1,2,abc,0.1\n")
        with pytest.raises(ArgumentError, match="malformed dataset row 2"):
            read_dataset_csv(path, dec.space)

    @pytest.mark.parametrize("value", ["inf", "-inf", "nan"])
    def test_nonfinite_output(self, dec, tmp_path, value):
        """Test that a non-finite output names its data row."""
        path = tmp_path / "data.csv"
        path.write_text(f"trial,i,node_index,y_1,y_2\n0,0,1,0.5,0.5\n0,1,2,{value},0.1\n")
        with pytest.raises(ArgumentError, match="malformed dataset row 2"):
            read_dataset_csv(path, dec.space)

    def test_node_index_outside_space(self, dec, tmp_path):
        """Test that node indices must address the space."""
        path = tmp_path / "data.csv"
        path.write_text("trial,i,node_index,y_1,y_2\n0,0,8,0.5,0.5\n")
        with pytest.raises(ArgumentError, match="row 1"):
            read_dataset_csv(path, dec.space)

    def test_missing_column(self, dec, tmp_path):
        """Test that the node index column is required."""
        path = tmp_path / "data.csv"
        path.write_text("trial,i,y_1\n0,0,0.5\n")
        with pytest.raises(ArgumentError):
            read_dataset_csv(path, dec.space)

    def test_missing_file(self, dec, tmp_path):
        """Test that a missing file is an input error."""
        with pytest.raises(ArgumentError):
            read_dataset_csv(tmp_path / "absent.csv", dec.space)
