import math

import numpy as np
import pytest

from ddspc.pce import (
    GermFamily,
    GermKind,
    PceVector,
    build_joint_basis,
    exact_pce_of_disturbance,
    gaussian_initial_basis,
    moments,
    pce_dynamics_step,
    sample_realization,
)


def uniform3():
    return (
        GermFamily.uniform(-0.01, 0.01),
        GermFamily.uniform(-1.0, 1.0),
        GermFamily.uniform(-0.1, 0.1),
    )


class TestGermFamily:
    def test_uniform_requires_ordered_support(self):
        with pytest.raises(ValueError):
            GermFamily.uniform(1.0, 1.0)

    def test_gaussian_requires_positive_std(self):
        with pytest.raises(ValueError):
            GermFamily.gaussian(0.0, 0.0)

    def test_uniform_moments(self):
        fam = GermFamily.uniform(-1.0, 1.0)
        assert fam.mean == 0.0
        assert fam.std == pytest.approx(1.0 / math.sqrt(3.0))

    @pytest.mark.parametrize(
        "fam",
        [GermFamily.uniform(-1.0, 1.0), GermFamily.uniform(0.5, 2.0), GermFamily.gaussian(1.0, 2.0)],
    )
    def test_orthonormality_by_quadrature(self, fam):
        # Gauss quadrature in the standardized variable is an independent oracle
        # for <phi_i, phi_j> = delta_ij up to degree 5.
        if fam.kind is GermKind.UNIFORM_LEGENDRE:
            t, wq = np.polynomial.legendre.leggauss(32)
            x = 0.5 * (t + 1.0) * (fam.high - fam.low) + fam.low
            wq = wq / 2.0
        else:
            t, wq = np.polynomial.hermite_e.hermegauss(32)
            x = fam.loc + fam.scale * t
            wq = wq / math.sqrt(2.0 * math.pi)
        for i in range(6):
            for j in range(i, 6):
                val = np.sum(wq * fam.orthonormal_poly(i, x) * fam.orthonormal_poly(j, x))
                assert val == pytest.approx(1.0 if i == j else 0.0, abs=1e-12)

    def test_degree1_is_standardization(self):
        fam = GermFamily.uniform(-0.2, 0.6)
        x = np.linspace(-0.2, 0.6, 7)
        np.testing.assert_allclose(fam.orthonormal_poly(1, x), (x - fam.mean) / fam.std, atol=1e-14)

    def test_degree_out_of_range(self):
        with pytest.raises(ValueError):
            GermFamily.gaussian().orthonormal_poly(6, 0.0)


class TestBuildJointBasis:
    def test_paper_dimensions(self):
        basis = build_joint_basis(9, uniform3(), 10)
        assert basis.dimension == 39
        assert basis.l_w == 4

    def test_minimal_dimensions(self):
        basis = build_joint_basis(1, (GermFamily.uniform(-1, 1),), 1)
        assert basis.dimension == 2

    def test_mixed_dimensions(self):
        basis = build_joint_basis(3, (GermFamily.uniform(-1, 1), GermFamily.gaussian()), 4)
        assert basis.dimension == 11

    def test_dimension_identity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            l_ini = int(rng.integers(1, 12))
            n_w = int(rng.integers(0, 5))
            horizon = int(rng.integers(1, 15))
            fams = tuple(GermFamily.gaussian() for _ in range(n_w))
            basis = build_joint_basis(l_ini, fams, horizon)
            assert basis.dimension == l_ini + horizon * n_w

    def test_blocks_partition_indices(self):
        basis = build_joint_basis(9, uniform3(), 10)
        seen = [0] + list(basis.initial_indices)
        for m in range(basis.horizon):
            seen.extend(basis.disturbance_block(m))
        assert sorted(seen) == list(range(basis.dimension))

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            build_joint_basis(0, uniform3(), 10)
        with pytest.raises(ValueError):
            build_joint_basis(9, uniform3(), 0)


class TestGaussianInitialBasis:
    def test_paper_count(self):
        l_ini, fams = gaussian_initial_basis(8)
        assert l_ini == 9
        assert len(fams) == 8

    def test_scalar(self):
        l_ini, _ = gaussian_initial_basis(1)
        assert l_ini == 2

    def test_sampled_initial_condition_is_gaussian(self):
        # Jarque-Bera on 1e5 samples of a random linear combination.
        from scipy import stats

        l_ini, fams = gaussian_initial_basis(4)
        basis = build_joint_basis(l_ini, (GermFamily.uniform(-1, 1),), 1, initial_families=fams)
        rng = np.random.default_rng(7)
        coeffs = np.zeros((basis.dimension, 1))
        coeffs[0, 0] = 0.4
        coeffs[1:l_ini, 0] = rng.normal(size=l_ini - 1)
        v = PceVector(coeffs, basis)
        germs = np.zeros((100_000, basis.dimension - 1))
        germs[:, : l_ini - 1] = rng.normal(size=(100_000, l_ini - 1))
        samples = sample_realization(v, germs)[:, 0]
        _, pvalue = stats.jarque_bera(samples)
        assert pvalue > 0.01


class TestMoments:
    def test_single_nonconstant_term(self):
        basis = build_joint_basis(2, (), 1)
        v = PceVector(np.array([[1.0], [2.0]]), basis)
        mean, cov = moments(v)
        assert mean[0] == 1.0
        assert cov[0, 0] == 4.0

    def test_uniform_exact_variance(self):
        basis = build_joint_basis(1, (GermFamily.uniform(-1, 1),), 1)
        v = exact_pce_of_disturbance((GermFamily.uniform(-1, 1),), basis, 0)
        mean, cov = moments(v)
        assert mean[0] == 0.0
        assert cov[0, 0] == pytest.approx(1.0 / 3.0)

    def test_covariance_matches_sampling(self):
        rng = np.random.default_rng(3)
        basis = build_joint_basis(
            3, (GermFamily.uniform(-1, 1), GermFamily.gaussian()), 1
        )  # L = 5
        v = PceVector(rng.normal(size=(5, 2)), basis)
        mean, cov = moments(v)
        n = 1_000_000
        samples = sample_realization(v, basis.sample_germ_values(rng, n))
        sample_cov = np.cov(samples.T)
        # 3 standard errors of a covariance entry, approximated elementwise
        se = 3.0 * np.sqrt(
            (np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n
        )
        assert np.all(np.abs(sample_cov - cov) <= se + 1e-12)
        assert np.allclose(samples.mean(axis=0), mean, atol=3.0 * np.sqrt(np.diag(cov).max() / n) + 1e-12)

    def test_covariance_symmetric_psd(self):
        rng = np.random.default_rng(11)
        basis = build_joint_basis(4, (GermFamily.uniform(-2, 2),), 3)
        v = PceVector(rng.normal(size=(basis.dimension, 3)), basis)
        _, cov = moments(v)
        np.testing.assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= -1e-12

    def test_mean_linearity(self):
        rng = np.random.default_rng(5)
        basis = build_joint_basis(3, (GermFamily.gaussian(),), 2)
        va = PceVector(rng.normal(size=(basis.dimension, 2)), basis)
        vb = PceVector(rng.normal(size=(basis.dimension, 2)), basis)
        combo = PceVector(2.0 * va.coefficients - 0.5 * vb.coefficients, basis)
        np.testing.assert_allclose(
            moments(combo)[0], 2.0 * moments(va)[0] - 0.5 * moments(vb)[0]
        )


class TestExactDisturbancePce:
    def test_unit_uniform_coefficient(self):
        fams = (GermFamily.uniform(-1, 1),)
        basis = build_joint_basis(2, fams, 3)
        v = exact_pce_of_disturbance(fams, basis, 0)
        j = basis.disturbance_block(0)[0]
        assert v.coefficients[j, 0] == pytest.approx(1.0 / math.sqrt(3.0))
        assert np.count_nonzero(v.coefficients) == 1

    def test_scaled_uniform_coefficient(self):
        fams = (GermFamily.uniform(-0.01, 0.01),)
        basis = build_joint_basis(2, fams, 2)
        v = exact_pce_of_disturbance(fams, basis, 1)
        j = basis.disturbance_block(1)[0]
        assert v.coefficients[j, 0] == pytest.approx(0.01 / math.sqrt(3.0))

    def test_gaussian_coefficient_is_std(self):
        fams = (GermFamily.gaussian(0.0, 2.0),)
        basis = build_joint_basis(2, fams, 1)
        v = exact_pce_of_disturbance(fams, basis, 0)
        assert v.coefficients[basis.disturbance_block(0)[0], 0] == 2.0

    def test_nonzero_mean_rejected(self):
        fams = (GermFamily.uniform(0.0, 1.0),)
        basis = build_joint_basis(2, fams, 1)
        with pytest.raises(ValueError):
            exact_pce_of_disturbance(fams, basis, 0)


class TestSampleRealization:
    def test_zero_draws_return_mean(self):
        basis = build_joint_basis(3, (GermFamily.uniform(-1, 1),), 2)
        rng = np.random.default_rng(0)
        v = PceVector(rng.normal(size=(basis.dimension, 2)), basis)
        np.testing.assert_allclose(
            sample_realization(v, np.zeros(basis.dimension - 1)), v.coefficients[0]
        )

    def test_single_coefficient(self):
        basis = build_joint_basis(2, (), 1)
        v = PceVector(np.array([[0.0], [1.0]]), basis)
        assert sample_realization(v, np.array([2.0]))[0] == 2.0

    def test_sampled_moments_match(self):
        rng = np.random.default_rng(21)
        basis = build_joint_basis(3, (GermFamily.uniform(-0.3, 0.3),), 2)
        v = PceVector(rng.normal(size=(basis.dimension, 1)), basis)
        mean, cov = moments(v)
        n = 1_000_000
        samples = sample_realization(v, basis.sample_germ_values(rng, n))[:, 0]
        assert abs(samples.mean() - mean[0]) <= 3.0 * math.sqrt(cov[0, 0] / n)
        var = cov[0, 0]
        # variance of the sample variance ~ (mu4 - var^2)/n, bounded by 3 var^2 for these germs
        assert abs(samples.var() - var) <= 3.0 * math.sqrt(3.0 * var**2 / n)

    def test_length_mismatch(self):
        basis = build_joint_basis(2, (), 1)
        v = PceVector(np.array([[0.0], [1.0]]), basis)
        with pytest.raises(ValueError):
            sample_realization(v, np.zeros(3))


class TestPceDynamicsStep:
    def _random_vectors(self, rng, basis, n_z, n_u, n_y):
        z = PceVector(rng.normal(size=(basis.dimension, n_z)), basis)
        u = PceVector(rng.normal(size=(basis.dimension, n_u)), basis)
        w = PceVector(rng.normal(size=(basis.dimension, n_y)), basis)
        return z, u, w

    def test_zero_inputs_zero_output(self):
        basis = build_joint_basis(3, (GermFamily.gaussian(),), 2)
        zeros = lambda n: PceVector(np.zeros((basis.dimension, n)), basis)
        y = pce_dynamics_step(np.ones((2, 3)), np.ones((2, 1)), zeros(3), zeros(1), zeros(2))
        assert not y.coefficients.any()

    def test_constant_basis_reduces_to_realization(self):
        basis = build_joint_basis(1, (), 1)
        rng = np.random.default_rng(2)
        phi, d = rng.normal(size=(2, 4)), rng.normal(size=(2, 1))
        z = PceVector(rng.normal(size=(1, 4)), basis)
        u = PceVector(rng.normal(size=(1, 1)), basis)
        w = PceVector(rng.normal(size=(1, 2)), basis)
        y = pce_dynamics_step(phi, d, z, u, w)
        np.testing.assert_allclose(
            y.coefficients[0], phi @ z.coefficients[0] + d @ u.coefficients[0] + w.coefficients[0]
        )

    def test_commutes_with_sampling(self):
        rng = np.random.default_rng(4)
        basis = build_joint_basis(4, (GermFamily.uniform(-1, 1), GermFamily.gaussian()), 3)
        phi, d = rng.normal(size=(2, 5)), rng.normal(size=(2, 3))
        z, u, w = self._random_vectors(rng, basis, 5, 3, 2)
        y = pce_dynamics_step(phi, d, z, u, w)
        germs = basis.sample_germ_values(rng, 50)
        lhs = sample_realization(y, germs)
        rhs = (
            sample_realization(z, germs) @ phi.T
            + sample_realization(u, germs) @ d.T
            + sample_realization(w, germs)
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_dimension_mismatch(self):
        basis = build_joint_basis(2, (), 1)
        z = PceVector(np.zeros((2, 3)), basis)
        u = PceVector(np.zeros((2, 1)), basis)
        w = PceVector(np.zeros((2, 2)), basis)
        with pytest.raises(ValueError):
            pce_dynamics_step(np.zeros((2, 4)), np.zeros((2, 1)), z, u, w)


class TestOrthonormalityMonteCarlo:
    def test_joint_inner_products(self):
        basis = build_joint_basis(
            3, (GermFamily.uniform(-1, 1), GermFamily.gaussian(0, 0.5)), 2
        )
        rng = np.random.default_rng(8)
        n = 1_000_000
        phi = np.hstack([np.ones((n, 1)), basis.sample_germ_values(rng, n)])
        gram = phi.T @ phi / n
        # inner products have unit-variance summands at most; 3 SE ~ 3/sqrt(n)
        # (germ products of independent unit-variance factors; kurtosis < 9 here)
        se = 3.0 * 3.0 / math.sqrt(n)
        np.testing.assert_allclose(gram, np.eye(basis.dimension), atol=se)
