"""Tests for the spectral layer on discrete spaces.

Mercer reconstruction, fractional powers, the norm identity, the data-free
minimizer f_lambda and the closed-form approximation error.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from main.exceptions import ArgumentError, RangeError
from main.kernels import (
    CouplingMatrix,
    DiagonalKernel,
    GaussianScalarKernel,
    LookupMatrixKernel,
    SeparableKernel,
    SumKernel,
)
from main.spectral import (
    DiscreteSpace,
    RhoFunction,
    apply_fractional_power,
    apply_integral_operator,
    approximation_error,
    compute_f_lambda,
    eigendecompose,
    mercer_reconstruct,
    rkhs_norm_via_space,
)


def _kernels(m):
    gaussian = GaussianScalarKernel(width=0.3)
    return {
        "separable": SeparableKernel(gaussian, CouplingMatrix.equicorrelated(m, 0.4)),
        "diagonal": DiagonalKernel([GaussianScalarKernel(width=0.2 + 0.1 * task) for task in range(m)]),
        "sum": SumKernel([
            SeparableKernel(gaussian, CouplingMatrix.identity(m)),
            SeparableKernel(GaussianScalarKernel(width=1.0), CouplingMatrix.equicorrelated(m, 0.8)),
        ]),
    }


@pytest.fixture
def space():
    weights = np.array([0.1, 0.2, 0.15, 0.05, 0.3, 0.2])
    return DiscreteSpace(np.linspace(0.0, 1.0, 6), weights)


@pytest.fixture
def universal_kernel():
    return SeparableKernel(GaussianScalarKernel(width=0.3), CouplingMatrix.equicorrelated(2, 0.5))


@pytest.fixture
def rank_deficient_kernel():
    return SeparableKernel(GaussianScalarKernel(width=0.3), CouplingMatrix(np.ones((2, 2))))


class TestDiscreteSpace:
    """Test discrete space validation and rho-geometry."""

    def test_rejects_zero_weight(self):
        """Test that every weight must be strictly positive."""
        with pytest.raises(ArgumentError):
            DiscreteSpace([0.0, 1.0], [1.0, 0.0])

    def test_rejects_unnormalized_weights(self):
        """Test that weights must sum to one."""
        with pytest.raises(ArgumentError):
            DiscreteSpace([0.0, 1.0], [0.5, 0.6])

    def test_rejects_duplicate_nodes(self):
        """Test that nodes must be distinct."""
        with pytest.raises(ArgumentError):
            DiscreteSpace.uniform([0.0, 0.0])

    def test_rho_inner_product(self, space):
        """Test <f, g>_rho = sum_i w_i f(z_i)^T g(z_i)."""
        f = RhoFunction(space, np.ones((6, 2)))
        g = RhoFunction(space, np.arange(12.0).reshape(6, 2))
        expected = sum(space.weights[i] * (2 * i + 2 * i + 1) for i in range(6))
        assert f.inner(g) == pytest.approx(expected)
        assert f.norm() == pytest.approx(np.sqrt(2.0))

    def test_index_lookup(self, space):
        """Test node lookup and its failure for foreign points."""
        assert space.index_of(space.nodes[3]) == 3
        with pytest.raises(ArgumentError):
            space.index_of(0.123)


class TestEigendecomposition:
    """Test the spectral decomposition of L_K."""

    def test_eigenfunctions_rho_orthonormal(self, space, universal_kernel):
        """Test <phi_i, phi_j>_rho = delta_ij."""
        dec = eigendecompose(universal_kernel, space)
        phi = dec.eigenfunction_matrix
        gram = phi.T @ (space.flat_weights(2)[:, None] * phi)
        assert_allclose(gram, np.eye(12), atol=1e-10)

    def test_eigenpairs_of_integral_operator(self, space, universal_kernel):
        """Test L_K phi_j = lambda_j phi_j."""
        dec = eigendecompose(universal_kernel, space)
        for j in range(dec.rank):
            phi = dec.eigenfunction(j)
            image = apply_integral_operator(universal_kernel, space, phi)
            assert_allclose(image.values, dec.eigenvalues[j] * phi.values, atol=1e-10)

    def test_rank_deficient_coupling(self, space, rank_deficient_kernel):
        """Test that a rank-one coupling halves the numerical rank."""
        dec = eigendecompose(rank_deficient_kernel, space)
        assert dec.rank == 6
        assert np.all(dec.eigenvalues >= 0.0)

    @pytest.mark.parametrize("name", ["separable", "diagonal", "sum"])
    def test_mercer_reconstruction(self, space, name):
        """Test full-mode reconstruction of every block K(z_i, z_k)."""
        kernel = _kernels(3)[name]
        dec = eigendecompose(kernel, space)
        scale = float(np.max(np.abs(dec.gram)))
        for i in range(space.size):
            for k in range(space.size):
                expected = kernel(space.nodes[i], space.nodes[k])
                assert_allclose(mercer_reconstruct(dec, i, k), expected, atol=1e-9 * scale)

    def test_mercer_lookup_identity(self):
        """Test reconstruction for the lookup identity kernel."""
        space = DiscreteSpace.uniform([0.0, 1.0, 2.0])
        kernel = LookupMatrixKernel.identity(space.nodes, m=2)
        dec = eigendecompose(kernel, space)
        assert_allclose(mercer_reconstruct(dec, 1, 1), np.eye(2), atol=1e-12)
        assert_allclose(mercer_reconstruct(dec, 0, 2), np.zeros((2, 2)), atol=1e-12)

    def test_mercer_rejects_bad_index(self, space, universal_kernel):
        """Test that node indices outside the space are refused."""
        dec = eigendecompose(universal_kernel, space)
        with pytest.raises(ArgumentError):
            mercer_reconstruct(dec, 0, space.size)


class TestFractionalPowers:
    """Test L_K^r and the norm identity."""

    def test_power_zero_is_projection(self, space, rank_deficient_kernel):
        """Test L_K^0 f = P_Phi f."""
        dec = eigendecompose(rank_deficient_kernel, space)
        f = RhoFunction(space, np.random.default_rng(1).standard_normal((6, 2)))
        projected, residual = dec.projection(f)
        assert_allclose(apply_fractional_power(dec, 0.0, f).values, projected.values, atol=1e-12)
        assert residual > 0.0

    def test_power_one_is_integral_operator(self, space, universal_kernel):
        """Test L_K^1 f = L_K f."""
        dec = eigendecompose(universal_kernel, space)
        f = RhoFunction(space, np.random.default_rng(2).standard_normal((6, 2)))
        assert_allclose(
            apply_fractional_power(dec, 1.0, f).values,
            apply_integral_operator(universal_kernel, space, f).values,
            atol=1e-10,
        )

    def test_negative_power_outside_span(self, space, rank_deficient_kernel):
        """Test that negative powers refuse functions outside the retained span."""
        dec = eigendecompose(rank_deficient_kernel, space)
        f = RhoFunction(space, np.column_stack([np.ones(6), -np.ones(6)]))
        with pytest.raises(RangeError):
            apply_fractional_power(dec, -0.5, f)

    def test_power_out_of_range(self, space, universal_kernel):
        """Test that |r| > 1 is refused."""
        dec = eigendecompose(universal_kernel, space)
        with pytest.raises(ArgumentError):
            apply_fractional_power(dec, 1.5, RhoFunction.zeros(space, 2))

    @pytest.mark.parametrize("kernel_name", ["universal_kernel", "rank_deficient_kernel"])
    def test_norm_identity(self, space, kernel_name, request):
        """Test ||L_K^{1/2} f||_K = ||P_Phi f||_rho over random functions."""
        kernel = request.getfixturevalue(kernel_name)
        dec = eigendecompose(kernel, space)
        rng = np.random.default_rng(4)
        for _ in range(50):
            f = RhoFunction(space, rng.standard_normal((6, 2)))
            half = apply_fractional_power(dec, 0.5, f)
            projected, _ = dec.projection(f)
            lhs = rkhs_norm_via_space(kernel, space, half, dec=dec)
            assert lhs == pytest.approx(projected.norm(), rel=1e-9)

    def test_kernel_section_norm(self, space, universal_kernel):
        """Test ||K(z, .) xi||_K^2 = xi^T K(z, z) xi via both coordinate routes."""
        dec = eigendecompose(universal_kernel, space)
        xi = np.array([0.7, -1.3])
        coefficients = np.zeros((6, 2))
        coefficients[2] = xi
        values = RhoFunction.from_vector(space, dec.gram @ coefficients.reshape(-1), 2)
        expected = np.sqrt(xi @ universal_kernel(space.nodes[2], space.nodes[2]) @ xi)
        assert np.linalg.norm(dec.kernel_coordinates_from_coefficients(coefficients)) == pytest.approx(expected, rel=1e-10)
        assert rkhs_norm_via_space(universal_kernel, space, values, dec=dec) == pytest.approx(expected, rel=1e-8)


class TestFLambda:
    """Test the data-free minimizer and the approximation error."""

    def test_lambda_zero_projects_target(self, space, universal_kernel):
        """Test f_0 = P_Phi f_rho."""
        dec = eigendecompose(universal_kernel, space)
        f_rho = dec.synthesize(np.array([0.5, -0.2, 0.1]))
        assert_allclose(compute_f_lambda(dec, f_rho, 0.0).values, f_rho.values, atol=1e-12)

    def test_matches_direct_minimization(self, space, universal_kernel):
        """Test the spectral formula against (L_K + lambda I) f = L_K f_rho."""
        dec = eigendecompose(universal_kernel, space)
        weights = space.flat_weights(2)
        rng = np.random.default_rng(5)
        for lam in (1e-3, 1e-1, 1.0):
            f_rho = dec.synthesize(rng.uniform(-1.0, 1.0, size=4))
            operator = dec.gram * weights[None, :]
            direct = np.linalg.solve(operator + lam * np.eye(12), operator @ f_rho.vector)
            assert_allclose(compute_f_lambda(dec, f_rho, lam).vector, direct, atol=1e-9)

    def test_rejects_negative_lambda(self, space, universal_kernel):
        """Test that lambda < 0 is refused."""
        dec = eigendecompose(universal_kernel, space)
        with pytest.raises(ArgumentError):
            compute_f_lambda(dec, RhoFunction.zeros(space, 2), -1.0)

    def test_approximation_bound(self, space, universal_kernel):
        """Test err_K <= lambda^{r - 1/2} nu over a grid of r, lambda and targets."""
        dec = eigendecompose(universal_kernel, space)
        rng = np.random.default_rng(6)
        violations = 0
        for r in (0.6, 0.75, 1.0):
            for _ in range(20):
                d = rng.uniform(-1.0, 1.0, size=dec.rank)
                f_rho = dec.synthesize(d * dec.retained_eigenvalues ** r)
                for lam in np.logspace(-4, 0, 13):
                    result = approximation_error(dec, f_rho, lam, r, float(np.linalg.norm(d)), source_coefficients=d)
                    violations += not result.holds
        assert violations == 0

    def test_approximation_error_recovers_coefficients(self, space, universal_kernel):
        """Test that the source coefficients recovered from f_rho give the same error."""
        dec = eigendecompose(universal_kernel, space)
        d = np.array([1.0, -0.5, 0.25])
        f_rho = dec.synthesize(d * dec.eigenvalues[:3])
        explicit = approximation_error(dec, f_rho, 0.01, 1.0, float(np.linalg.norm(d)), source_coefficients=d)
        recovered = approximation_error(dec, f_rho, 0.01, 1.0, float(np.linalg.norm(d)))
        assert recovered.err_k == pytest.approx(explicit.err_k, rel=1e-8)

    def test_approximation_rejects_small_r(self, space, universal_kernel):
        """Test that r <= 1/2 is outside the supported regime."""
        dec = eigendecompose(universal_kernel, space)
        with pytest.raises(ArgumentError):
            approximation_error(dec, RhoFunction.zeros(space, 2), 0.1, 0.5, 1.0)


class TestIntegralOperator:
    """Test positivity, self-adjointness and the trace of L_K."""

    def test_self_adjoint(self, space, universal_kernel):
        """Test <L_K f, g>_rho = <f, L_K g>_rho."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            f = RhoFunction(space, rng.standard_normal((6, 2)))
            g = RhoFunction(space, rng.standard_normal((6, 2)))
            lhs = apply_integral_operator(universal_kernel, space, f).inner(g)
            rhs = f.inner(apply_integral_operator(universal_kernel, space, g))
            assert abs(lhs - rhs) <= 1e-10

    @pytest.mark.parametrize("kernel_name", ["universal_kernel", "rank_deficient_kernel"])
    def test_positive(self, space, kernel_name, request):
        """Test <L_K f, f>_rho >= 0 for random f."""
        kernel = request.getfixturevalue(kernel_name)
        rng = np.random.default_rng(12)
        for _ in range(50):
            f = RhoFunction(space, rng.standard_normal((6, 2)))
            assert apply_integral_operator(kernel, space, f).inner(f) >= -1e-12

    @pytest.mark.parametrize("name", ["separable", "diagonal", "sum"])
    def test_trace_identity(self, space, name):
        """Test sum_j lambda_j = sum_i w_i trace K(z_i, z_i)."""
        kernel = _kernels(3)[name]
        dec = eigendecompose(kernel, space)
        expected = sum(w * np.trace(kernel(z, z)) for z, w in zip(space.nodes, space.weights))
        assert float(np.sum(dec.eigenvalues)) == pytest.approx(expected, abs=1e-10)

    def test_lookup_identity_halves(self):
        """Test L_K f = f / 2 for the identity kernel on two uniform nodes."""
        space = DiscreteSpace.uniform([0.0, 1.0])
        kernel = LookupMatrixKernel.identity(space.nodes, m=1)
        f = RhoFunction(space, [[3.0], [-1.0]])
        assert_allclose(apply_integral_operator(kernel, space, f).values, [[1.5], [-0.5]])
        assert_allclose(eigendecompose(kernel, space).eigenvalues, [0.5, 0.5])


class TestSpectralIdentities:
    """Test membership, the square-root semigroup and the approximation error."""

    def test_half_power_twice_is_integral_operator(self, space, universal_kernel):
        """Test L_K^{1/2} L_K^{1/2} f = L_K f."""
        dec = eigendecompose(universal_kernel, space)
        rng = np.random.default_rng(13)
        for _ in range(10):
            f = RhoFunction(space, rng.standard_normal((6, 2)))
            twice = apply_fractional_power(dec, 0.5, apply_fractional_power(dec, 0.5, f))
            assert_allclose(twice.values, apply_integral_operator(universal_kernel, space, f).values, atol=1e-10)

    def test_membership_norm(self, space, universal_kernel):
        """Test ||sum_j c_j phi_j||_K^2 = sum_j c_j^2 / lambda_j."""
        dec = eigendecompose(universal_kernel, space)
        rng = np.random.default_rng(14)
        for _ in range(10):
            c = rng.standard_normal(4)
            f_c = dec.synthesize(c)
            expected = float(np.sum(c ** 2 / dec.eigenvalues[:4]))
            assert rkhs_norm_via_space(universal_kernel, space, f_c, dec=dec) ** 2 == pytest.approx(expected, rel=1e-9)

    def test_single_mode_approximation_error(self):
        """Test err_K = 1/2 and bound 1 for lambda_1 = 1, d_1 = 1, r = 1, lambda = 1."""
        space = DiscreteSpace.uniform([0.0])
        dec = eigendecompose(LookupMatrixKernel.identity(space.nodes, m=1), space)
        assert_allclose(dec.eigenvalues, [1.0])
        f_rho = dec.synthesize(np.array([1.0]))
        result = approximation_error(dec, f_rho, 1.0, 1.0, 1.0, source_coefficients=[1.0])
        assert result.err_k == pytest.approx(0.5)
        assert result.bound == pytest.approx(1.0)
        assert_allclose(dec.coefficients(compute_f_lambda(dec, f_rho, 1.0)), [0.5])

    def test_error_matches_kernel_norm_of_difference(self, space, universal_kernel):
        """Test the closed-form err_K against ||f_lambda - f_rho||_K computed from node values."""
        dec = eigendecompose(universal_kernel, space)
        rng = np.random.default_rng(15)
        for r in (0.75, 1.0):
            d = rng.uniform(-1.0, 1.0, size=5)
            f_rho = dec.synthesize(d * dec.eigenvalues[:5] ** r)
            for lam in (1e-3, 1e-2, 1e-1):
                closed = approximation_error(dec, f_rho, lam, r, float(np.linalg.norm(d)), source_coefficients=d)
                difference = compute_f_lambda(dec, f_rho, lam) - f_rho
                direct = rkhs_norm_via_space(universal_kernel, space, difference, dec=dec)
                assert closed.err_k == pytest.approx(direct, rel=1e-8)
