"""Lattice GMRF: precision construction, sampling, density, sigma Gibbs."""

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose
from scipy import stats

from compfield.errors import NumericError
from compfield.gmrf import (
    GmrfSpec,
    LatticeGraph,
    build_scalar_precision,
    field_logpdf,
    joint_precision,
    sample_field,
    scalar_precision_logdet,
    sigma_gibbs_conditional,
)
from compfield.linalg import SparseCholesky, inverse_wishart_logpdf, sample_inverse_wishart

RNG = np.random.default_rng(987)


def dense_laplacian(graph):
    a = graph.adjacency.toarray()
    return np.diag(a.sum(axis=1)) - a


def random_spd(q, rng, scale=1.0):
    a = rng.normal(size=(q, q))
    return scale * (a @ a.T + q * np.eye(q))


class TestLatticeGraph:
    def test_adjacency_invariants(self):
        g = LatticeGraph(4, 5)
        a = g.adjacency.toarray()
        assert np.array_equal(a, a.T)
        assert np.all(np.diag(a) == 0)
        assert set(np.unique(a)) <= {0.0, 1.0}

    def test_laplacian_psd_one_null_vector(self):
        g = LatticeGraph(3, 4)
        lam = np.linalg.eigvalsh(dense_laplacian(g))
        assert lam[0] == pytest.approx(0.0, abs=1e-10)
        assert lam[1] > 1e-8  # connected: exactly one zero eigenvalue

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            LatticeGraph(0, 3)
        with pytest.raises(ValueError):
            LatticeGraph(2, 2, node_area=np.zeros(4))


class TestScalarPrecision:
    def test_2x2_dense_oracle(self):
        g = LatticeGraph(2, 2)
        q = build_scalar_precision(g, 1.0).toarray()
        gd = dense_laplacian(g)
        expected = (np.eye(4) + gd) @ (np.eye(4) + gd) / (4 * np.pi)
        assert_allclose(q, expected, rtol=1e-12)

    def test_large_kappa_diagonal_dominance(self):
        g = LatticeGraph(4, 4)
        kappa = 1e4
        q = build_scalar_precision(g, kappa).toarray()
        limit = kappa**2 / (4 * np.pi) * np.eye(16)
        assert_allclose(q / (kappa**2 / (4 * np.pi)), np.eye(16), atol=1e-3)
        # neighbor correlations vanish
        cov = np.linalg.inv(q)
        corr = cov / np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
        assert np.abs(corr - np.eye(16)).max() < 1e-6
        del limit

    def test_interior_marginal_variance_near_one(self):
        g = LatticeGraph(6, 6)
        for kappa in (0.5, 1.0, 2.0):
            cov = np.linalg.inv(build_scalar_precision(g, kappa).toarray())
            interior = [r * 6 + c for r in range(2, 4) for c in range(2, 4)]
            d = np.diag(cov)[interior]
            assert np.all(d > 0.5) and np.all(d < 2.0)

    def test_invalid_kappa(self):
        g = LatticeGraph(3, 3)
        for bad in (0.0, -1.0, np.nan, np.inf):
            with pytest.raises(ValueError):
                build_scalar_precision(g, bad)

    @pytest.mark.parametrize("kappa", [1e-3, 1.0, 1e3])
    def test_cholesky_succeeds_and_symmetric(self, kappa):
        g = LatticeGraph(50, 50)
        q = build_scalar_precision(g, kappa)
        asym = np.abs(q - q.T).max()
        assert asym < 1e-12 * max(1.0, np.abs(q.data).max())
        fac = SparseCholesky(q)
        assert np.isfinite(fac.logdet)

    def test_markov_sparsity_is_second_order(self):
        g = LatticeGraph(5, 7)
        q = build_scalar_precision(g, 0.9)
        a = g.adjacency
        two_hop = ((a + sp.identity(g.n)) @ (a + sp.identity(g.n))).toarray() > 0
        assert np.all((q.toarray() != 0) <= two_hop)

    def test_eigen_logdet_matches_factorization(self):
        for nr, nc, kappa in [(2, 2, 1.0), (6, 6, 0.7), (5, 9, 2.3)]:
            g = LatticeGraph(nr, nc)
            ld = scalar_precision_logdet(g, kappa)
            ld_fac = SparseCholesky(build_scalar_precision(g, kappa)).logdet
            assert_allclose(ld, ld_fac, atol=1e-9)


class TestJointPrecision:
    def test_identity_sigma_block_diagonal(self):
        g = LatticeGraph(3, 3)
        spec = GmrfSpec(0.8, np.eye(2), g)
        j = joint_precision(spec).toarray()
        q = build_scalar_precision(g, 0.8).toarray()
        expected = np.block([[q, np.zeros_like(q)], [np.zeros_like(q), q]])
        assert_allclose(j, expected, atol=1e-12)

    def test_dense_kron_oracle(self):
        g = LatticeGraph(2, 2)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(1.3, sigma, g)
        j = joint_precision(spec).toarray()
        expected = np.kron(np.linalg.inv(sigma), build_scalar_precision(g, 1.3).toarray())
        assert_allclose(j, expected, rtol=1e-10)

    def test_kron_logdet_identity(self):
        g = LatticeGraph(3, 4)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(0.6, sigma, g)
        sign, ld = np.linalg.slogdet(joint_precision(spec).toarray())
        assert sign > 0
        n = g.n
        _, ld_q = np.linalg.slogdet(build_scalar_precision(g, 0.6).toarray())
        _, ld_si = np.linalg.slogdet(np.linalg.inv(sigma))
        assert_allclose(ld, n * ld_si + 2 * ld_q, rtol=1e-10)

    def test_not_spd_sigma_rejected(self):
        g = LatticeGraph(2, 2)
        with pytest.raises((NumericError, ValueError)):
            GmrfSpec(1.0, np.array([[1.0, 2.0], [2.0, 1.0]]), g)

    def test_1x1_lattice_degenerate(self):
        g = LatticeGraph(1, 1)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(1.0, sigma, g)
        j = joint_precision(spec).toarray()
        q00 = build_scalar_precision(g, 1.0).toarray()[0, 0]
        assert_allclose(j, np.linalg.inv(sigma) * q00, rtol=1e-12)


class TestSampleField:
    def test_seed_determinism(self):
        g = LatticeGraph(4, 4)
        spec = GmrfSpec(1.0, random_spd(2, RNG), g)
        x1 = sample_field(spec, np.random.default_rng(5))
        x2 = sample_field(spec, np.random.default_rng(5))
        assert np.array_equal(x1, x2)

    def test_diagonal_sigma_independent_fields(self):
        g = LatticeGraph(5, 5)
        spec = GmrfSpec(1.0, np.diag([1.0, 4.0]), g)
        xs = sample_field(spec, np.random.default_rng(6), size=40_000)
        f1 = xs[:, :, 0].ravel()
        f2 = xs[:, :, 1].ravel()
        corr = np.corrcoef(f1, f2)[0, 1]
        assert abs(corr) < 0.01
        # amplitude ratio ~ 2
        assert 1.8 < f2.std() / f1.std() < 2.2

    def test_empirical_covariance_small_lattice(self):
        g = LatticeGraph(4, 4)
        sigma = np.array([[0.8, 0.3], [0.3, 1.1]])
        spec = GmrfSpec(0.9, sigma, g)
        xs = sample_field(spec, np.random.default_rng(7), size=100_000)
        # field-major flatten per draw
        v = np.concatenate([xs[:, :, 0], xs[:, :, 1]], axis=1)
        emp = v.T @ v / v.shape[0]
        cov = np.linalg.inv(joint_precision(spec).toarray())
        assert np.abs(emp - cov).max() < 0.05


class TestFieldLogpdf:
    def test_zero_field_closed_form(self):
        g = LatticeGraph(3, 3)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(1.1, sigma, g)
        lp = field_logpdf(np.zeros((9, 2)), spec)
        _, ld = np.linalg.slogdet(joint_precision(spec).toarray())
        assert_allclose(lp, -0.5 * (18 * np.log(2 * np.pi) - ld), rtol=1e-10)

    def test_dense_mvn_oracle(self):
        g = LatticeGraph(2, 2)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(0.85, sigma, g)
        cov = np.linalg.inv(joint_precision(spec).toarray())
        mvn = stats.multivariate_normal(mean=np.zeros(8), cov=cov)
        for _ in range(10):
            x = sample_field(spec, RNG)
            assert_allclose(field_logpdf(x, spec), mvn.logpdf(x.ravel(order="F")), atol=1e-8)

    def test_scaling_decreases_density(self):
        g = LatticeGraph(3, 3)
        spec = GmrfSpec(1.0, np.eye(2), g)
        x = sample_field(spec, np.random.default_rng(8))
        assert field_logpdf(10 * x, spec) < field_logpdf(x, spec)

    def test_dimension_mismatch(self):
        g = LatticeGraph(3, 3)
        spec = GmrfSpec(1.0, np.eye(2), g)
        with pytest.raises(ValueError):
            field_logpdf(np.zeros((9, 3)), spec)

    def test_sampler_density_consistency(self):
        # importance-weight diagnostic: dense and sparse densities agree on
        # sampled fields, so the weights are exactly one
        g = LatticeGraph(3, 3)
        sigma = random_spd(2, RNG)
        spec = GmrfSpec(1.2, sigma, g)
        cov = np.linalg.inv(joint_precision(spec).toarray())
        mvn = stats.multivariate_normal(mean=np.zeros(18), cov=cov)
        rng = np.random.default_rng(11)
        diffs = []
        for _ in range(200):
            x = sample_field(spec, rng)
            diffs.append(mvn.logpdf(x.ravel(order="F")) - field_logpdf(x, spec))
        w = np.exp(diffs)
        assert abs(w.mean() - 1.0) < 1e-8
        assert np.abs(diffs).max() < 1e-8


class TestSigmaGibbs:
    def test_zero_field_reduces_to_prior(self):
        g = LatticeGraph(3, 3)
        q = build_scalar_precision(g, 1.0)
        prior_scale = np.eye(2)
        rng = np.random.default_rng(12)
        n = g.n
        draws = np.array([
            sigma_gibbs_conditional(np.zeros((n, 2)), q, 4.0, prior_scale, rng)
            for _ in range(40_000)
        ])
        # InverseWishart(4 + n, I) mean = I / (4 + n - 2 - 1)
        expected = prior_scale / (4.0 + n - 3.0)
        se = draws.std(axis=0).max() / np.sqrt(len(draws))
        assert np.abs(draws.mean(axis=0) - expected).max() < 4 * se + 1e-4

    def test_posterior_mean_formula(self):
        g = LatticeGraph(3, 3)
        q = build_scalar_precision(g, 1.0)
        rng = np.random.default_rng(13)
        x = sample_field(GmrfSpec(1.0, np.eye(2), g), rng)
        prior_df, prior_scale = 5.0, 0.5 * np.eye(2)
        s = prior_scale + x.T @ (q @ x)
        n = g.n
        expected = s / (prior_df + n - 2 - 1)
        draws = np.array([
            sigma_gibbs_conditional(x, q, prior_df, prior_scale, rng)
            for _ in range(100_000)
        ])
        rel = np.abs(draws.mean(axis=0) - expected) / np.abs(expected).max()
        assert rel.max() < 0.02

    def test_scalar_case_matches_inverse_gamma(self):
        # K-1 = 1: InverseWishart(df, s) is InvGamma(df/2, s/2)
        g = LatticeGraph(2, 2)
        q = build_scalar_precision(g, 1.0)
        x = np.full((4, 1), 0.3)
        df0, s0 = 3.0, np.array([[1.2]])
        rng = np.random.default_rng(14)
        draws = np.array([
            sigma_gibbs_conditional(x, q, df0, s0, rng)[0, 0] for _ in range(30_000)
        ])
        s_post = float(s0[0, 0] + (x.T @ (q @ x))[0, 0])
        df_post = df0 + 4
        stat, p = stats.kstest(draws, stats.invgamma(df_post / 2, scale=s_post / 2).cdf)
        assert p > 0.01

    def test_bartlett_matches_scipy_oracle(self):
        df, scale = 7.0, np.array([[2.0, 0.4], [0.4, 1.0]])
        rng = np.random.default_rng(15)
        ours = np.array([sample_inverse_wishart(df, scale, rng) for _ in range(60_000)])
        oracle = stats.invwishart(df=df, scale=scale)
        orc = oracle.rvs(size=60_000, random_state=np.random.default_rng(16))
        assert np.abs(ours.mean(axis=0) - orc.mean(axis=0)).max() < 0.02
        stat, p = stats.kstest(ours[:, 0, 0], orc[:, 0, 0])
        assert p > 0.01

    def test_logpdf_matches_scipy(self):
        df, scale = 6.0, np.array([[1.5, 0.2], [0.2, 0.9]])
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = sample_inverse_wishart(df, scale, rng)
            assert_allclose(
                inverse_wishart_logpdf(x, df, scale),
                stats.invwishart(df=df, scale=scale).logpdf(x),
                rtol=1e-10,
            )

    def test_prior_df_validation(self):
        g = LatticeGraph(2, 2)
        q = build_scalar_precision(g, 1.0)
        with pytest.raises(ValueError):
            sigma_gibbs_conditional(np.zeros((4, 2)), q, 0.5, np.eye(2),
                                    np.random.default_rng(0))
