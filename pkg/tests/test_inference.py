"""MCMC engine: determinism, summaries, decomposition, predictive regions."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from compfield.compositional import alr_inverse
from compfield.errors import InsufficientSamplesError
from compfield.gmrf import GmrfSpec, LatticeGraph
from compfield.inference import (
    ChainConfig,
    ChainSampler,
    PosteriorSummary,
    decompose_predictor,
    effective_sample_size,
    merge_summaries,
    predictive_region,
    reconstruct,
    reconstruct_from_eta,
    resume_chain,
    run_chain,
    run_chains,
)
from compfield.io import LatticeGrid
from compfield.model import (
    Model,
    ObservationSet,
    PriorConfig,
    build_design,
    simulate_dataset,
)

from conftest import make_benchmark


def stub_summary(eta_samples, beta_samples=None, alpha_samples=None,
                 config=None, column_names=("intercept",)):
    s = np.asarray(eta_samples)
    n_keep = s.shape[0]
    beta = (
        np.asarray(beta_samples)
        if beta_samples is not None
        else np.zeros((n_keep, len(column_names), s.shape[2]))
    )
    alpha = (
        np.asarray(alpha_samples) if alpha_samples is not None else np.full(n_keep, 10.0)
    )
    return PosteriorSummary(
        z_mean=reconstruct_from_eta(s),
        eta_samples=s,
        alpha_samples=alpha,
        kappa_samples=np.ones(n_keep),
        sigma_samples=np.tile(np.eye(s.shape[2]), (n_keep, 1, 1)),
        beta_samples=beta,
        loglik_samples=np.zeros(n_keep),
        traces={},
        acceptance={},
        ess={},
        config=config or ChainConfig(n_samples=10, burn_in=0, thin=1, seed=0),
        n_categories=s.shape[2] + 1,
        column_names=list(column_names),
    )


class TestChainConfig:
    def test_burn_in_bound(self):
        with pytest.raises(ValueError):
            ChainConfig(n_samples=100, burn_in=100)
        with pytest.raises(ValueError):
            ChainConfig(n_samples=0)
        with pytest.raises(ValueError):
            ChainConfig(thin=0)

    def test_spec_defaults(self):
        cfg = ChainConfig()
        assert cfg.n_samples == 100_000
        assert cfg.burn_in == 10_000
        assert cfg.thin == 10
        assert cfg.mala_target == 0.57
        assert cfg.rw_target == 0.44


class TestRunChain:
    def test_rejects_empty_observations(self):
        bench = make_benchmark(n_rows=3, n_cols=3)
        empty = ObservationSet(np.zeros(0, dtype=int), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            run_chain(bench["model"], empty, ChainConfig(n_samples=10, burn_in=0))

    def test_single_observation_shrinks_toward_it(self):
        grid = LatticeGrid(n_rows=3, n_cols=3, lon0=0, lat0=0, resolution=1.0)
        grid.observed_mask = np.zeros(9, bool)
        grid.observed_mask[4] = True
        graph = LatticeGraph(3, 3)
        design = build_design(grid, ())
        model = Model(graph=graph, design=design, priors=PriorConfig())
        obs = ObservationSet([4], [[0.8, 0.1, 0.1]])
        cfg = ChainConfig(n_samples=1500, burn_in=400, thin=2, seed=3)
        summary = run_chain(model, obs, cfg)
        z = reconstruct(summary)
        assert z[4, 0] > 0.5  # pulled from 1/3 toward 0.8

    def test_seed_determinism_bit_for_bit(self):
        bench = make_benchmark(n_rows=4, n_cols=4, seed=10)
        cfg = ChainConfig(n_samples=300, burn_in=100, thin=2, seed=21)
        s1 = run_chain(bench["model"], bench["obs"], cfg)
        s2 = run_chain(bench["model"], bench["obs"], cfg)
        assert np.array_equal(s1.eta_samples, s2.eta_samples)
        for k in s1.traces:
            assert np.array_equal(s1.traces[k], s2.traces[k])
        s3 = run_chain(bench["model"], bench["obs"],
                       ChainConfig(n_samples=300, burn_in=100, thin=2, seed=22))
        assert not np.array_equal(s1.traces["alpha"], s3.traces["alpha"])

    def test_noiseless_recovery_with_fixed_alpha(self):
        # huge fixed alpha, observations equal to the true surface
        bench = make_benchmark(n_rows=5, n_cols=5, frac=1.0, alpha=1e8, seed=33)
        cfg = ChainConfig(
            n_samples=3000, burn_in=800, thin=2, seed=5, update_alpha=False,
        )
        sampler = ChainSampler(bench["model"], bench["obs"], cfg)
        sampler.state.alpha = 1e8
        sampler._refresh_eta_cache()
        summary = sampler.run()
        z = reconstruct(summary)
        truth = bench["truth"]["z"]
        err = np.abs(z[bench["obs"].cell_indices] - truth[bench["obs"].cell_indices])
        assert err.max() < 0.02

    def test_acceptance_windows_on_benchmark(self, benchmark_fit):
        _, summary = benchmark_fit
        assert 0.40 <= summary.acceptance["xbeta"] <= 0.75
        assert 0.25 <= summary.acceptance["alpha"] <= 0.60
        assert 0.25 <= summary.acceptance["kappa"] <= 0.60

    def test_summary_simplex_invariants(self, benchmark_fit):
        _, summary = benchmark_fit
        assert np.all(summary.z_mean >= 0)
        assert_allclose(summary.z_mean.sum(axis=1), 1.0, atol=1e-12)

    def test_progress_callback(self):
        bench = make_benchmark(n_rows=3, n_cols=3)
        seen = []
        cfg = ChainConfig(
            n_samples=60, burn_in=10, thin=2, seed=1,
            progress=lambda it, lp, acc: seen.append((it, lp, dict(acc))),
            progress_every=20,
        )
        run_chain(bench["model"], bench["obs"], cfg)
        assert [s[0] for s in seen] == [20, 40, 60]
        assert all(np.isfinite(s[1]) for s in seen)


class TestCheckpointResume:
    def test_resume_equals_uninterrupted(self, tmp_path):
        bench = make_benchmark(n_rows=4, n_cols=4, seed=2)
        ckpt = tmp_path / "chain.ckpt"
        full_cfg = ChainConfig(n_samples=400, burn_in=120, thin=3, seed=9)
        s_full = run_chain(bench["model"], bench["obs"], full_cfg)

        part_cfg = ChainConfig(n_samples=400, burn_in=120, thin=3, seed=9,
                               checkpoint_every=150, checkpoint_path=str(ckpt))
        sampler = ChainSampler(bench["model"], bench["obs"], part_cfg)
        while sampler.iteration < 150:
            sampler.step()
            sampler._record()
        sampler.save_checkpoint(ckpt)

        s_resumed = resume_chain(ckpt, bench["model"], bench["obs"], part_cfg)
        assert np.array_equal(s_full.eta_samples, s_resumed.eta_samples)
        for k in s_full.traces:
            assert np.array_equal(s_full.traces[k], s_resumed.traces[k])
        assert np.array_equal(s_full.loglik_samples, s_resumed.loglik_samples)

    def test_resume_across_burn_in_boundary(self, tmp_path):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=4)
        ckpt = tmp_path / "early.ckpt"
        cfg = ChainConfig(n_samples=300, burn_in=150, thin=2, seed=13)
        s_full = run_chain(bench["model"], bench["obs"], cfg)
        sampler = ChainSampler(bench["model"], bench["obs"], cfg)
        while sampler.iteration < 60:  # stop mid burn-in
            sampler.step()
            sampler._record()
        sampler.save_checkpoint(ckpt)
        s_resumed = resume_chain(ckpt, bench["model"], bench["obs"], cfg)
        assert np.array_equal(s_full.eta_samples, s_resumed.eta_samples)
        assert np.array_equal(s_full.traces["kappa"], s_resumed.traces["kappa"])


class TestReconstruct:
    def test_single_sample(self):
        eta = np.random.default_rng(0).normal(size=(1, 6, 2))
        s = stub_summary(eta)
        assert_allclose(reconstruct(s), alr_inverse(eta[0]), atol=1e-12)

    def test_constant_chain(self):
        eta0 = np.random.default_rng(1).normal(size=(6, 2))
        s = stub_summary(np.tile(eta0, (20, 1, 1)))
        assert_allclose(reconstruct(s), alr_inverse(eta0), atol=1e-12)

    def test_mean_on_simplex_not_eta_scale(self):
        # frozen two-point example: mean of z differs from z of mean eta
        eta = np.array([[[2.0, 0.0]], [[-2.0, 0.0]]])
        s = stub_summary(eta)
        z = reconstruct(s)[0]
        assert_allclose(z, [0.42518249, 0.28740875, 0.28740875], atol=1e-7)
        z_of_mean = alr_inverse(np.array([0.0, 0.0]))
        assert np.abs(z - z_of_mean).max() > 0.09

    def test_empty_rejected(self):
        with pytest.raises(InsufficientSamplesError):
            reconstruct_from_eta(np.zeros((0, 4, 2)))


class TestDecompose:
    def test_stages_without_aux(self, benchmark_fit):
        bench, summary = benchmark_fit
        stages = decompose_predictor(summary, bench["model"])
        labels = [s[0] for s in stages]
        assert labels == ["mean_structure", "full_predictor"]

    def test_zero_beta_stages_equal_intercept_field(self):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=6,
                               extra_covariates=_aux_covariates)
        design = build_design(bench["grid"], ("elevation", "aux"))
        model = Model(graph=bench["graph"], design=design, priors=PriorConfig())
        n = bench["grid"].n_cells
        eta = np.zeros((4, n, 2))
        s = stub_summary(eta, beta_samples=np.zeros((4, design.n_columns, 2)),
                         column_names=design.column_names)
        stages = dict(decompose_predictor(s, model))
        assert_allclose(stages["covariate_scaled"], np.full((n, 3), 1 / 3), atol=1e-12)
        assert_allclose(stages["mean_structure"], np.full((n, 3), 1 / 3), atol=1e-12)

    def test_no_spatial_effect_stage4_equals_stage3(self):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=7)
        design = bench["design"]
        n = bench["grid"].n_cells
        rng = np.random.default_rng(0)
        beta = rng.normal(size=(8, design.n_columns, 2)) * 0.3
        eta = np.einsum("np,spf->snf", design.b, beta)  # X = 0
        s = stub_summary(eta, beta_samples=beta, column_names=design.column_names)
        stages = dict(decompose_predictor(s, bench["model"]))
        assert_allclose(stages["full_predictor"], stages["mean_structure"], atol=1e-12)

    def test_stage4_is_alr_of_mean_eta(self, benchmark_fit):
        bench, summary = benchmark_fit
        stages = dict(decompose_predictor(summary, bench["model"]))
        expected = alr_inverse(summary.eta_samples.mean(axis=0))
        assert_allclose(stages["full_predictor"], expected, atol=1e-12)

    def test_aux_stages_present_with_aux_model(self):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=8,
                               extra_covariates=_aux_covariates)
        design = build_design(bench["grid"], ("elevation", "aux"))
        model = Model(graph=bench["graph"], design=design, priors=PriorConfig())
        n = bench["grid"].n_cells
        rng = np.random.default_rng(1)
        beta = rng.normal(size=(5, design.n_columns, 2)) * 0.2
        eta = np.einsum("np,spf->snf", design.b, beta)
        s = stub_summary(eta, beta_samples=beta, column_names=design.column_names)
        stages = decompose_predictor(s, model)
        labels = [t[0] for t in stages]
        assert labels == ["covariate", "covariate_scaled", "mean_structure", "full_predictor"]
        assert_allclose(stages[0][1], bench["grid"].covariates["aux"], atol=1e-12)


def _aux_covariates(rng, grid):
    aux = rng.dirichlet(np.full(3, 4.0), size=grid.n_cells)
    aux = np.clip(aux, 1e-4, None)
    return {"aux": aux / aux.sum(axis=1, keepdims=True)}


class TestPredictiveRegion:
    def _wide_summary(self, sd=5.0, n=4000, seed=0):
        rng = np.random.default_rng(seed)
        eta = rng.normal(scale=sd, size=(n, 1, 2))
        return stub_summary(eta)

    def test_point_mass_covers_at_most_one_cell(self):
        eta = np.tile(np.array([[0.3, -0.2]]), (50, 1, 1))
        s = stub_summary(eta)
        region = predictive_region(s, 0, level=0.95, raster_size=256)
        assert region.coverage_fraction <= 1.0 / (256 * 256 * 0.4)

    def test_wide_gaussian_covers_most_of_triangle(self):
        s = self._wide_summary()
        region = predictive_region(s, 0, level=0.95)
        assert region.coverage_fraction > 0.5

    def test_monte_carlo_rasterization_oracle(self):
        # estimate the covered fraction by uniform simplex sampling through
        # the same membership rule
        s = self._wide_summary(sd=2.0, seed=3)
        region = predictive_region(s, 0, level=0.9, raster_size=512)
        from scipy.stats import chi2

        eta = s.eta_samples[:, 0, :]
        m, c = eta.mean(axis=0), np.cov(eta, rowvar=False)
        rng = np.random.default_rng(4)
        u = rng.dirichlet(np.ones(3), size=200_000)
        u = np.clip(u, 1e-12, None)
        u /= u.sum(axis=1, keepdims=True)
        e = np.log(u[:, :2]) - np.log(u[:, 2:])
        d = e - m
        qf = np.einsum("ij,jk,ik->i", d, np.linalg.inv(c), d)
        frac = float((qf <= chi2.ppf(0.9, 2)).mean())
        assert abs(region.coverage_fraction - frac) < 0.01

    def test_nested_levels(self):
        s = self._wide_summary(sd=1.0, seed=5)
        r50 = predictive_region(s, 0, level=0.5)
        r95 = predictive_region(s, 0, level=0.95)
        assert r50.coverage_fraction < r95.coverage_fraction
        # raster-subset check: every covered 50% cell is covered at 95%
        from scipy.stats import chi2

        eta = s.eta_samples[:, 0, :]
        m, c = eta.mean(axis=0), np.cov(eta, rowvar=False)
        from compfield.inference import _ternary_raster

        lam, inside = _ternary_raster(256)
        zr = np.clip(lam, 1e-12, None)
        zr /= zr.sum(axis=1, keepdims=True)
        er = np.log(zr[:, :2]) - np.log(zr[:, 2:])
        d = er - m
        qf = np.einsum("ij,jk,ik->i", d, np.linalg.inv(c), d)
        in50 = inside & (qf <= chi2.ppf(0.5, 2))
        in95 = inside & (qf <= chi2.ppf(0.95, 2))
        assert np.all(in95[in50])

    def test_coverage_in_unit_interval(self, benchmark_fit):
        _, summary = benchmark_fit
        region = predictive_region(summary, 12, level=0.95)
        assert 0.0 <= region.coverage_fraction <= 1.0
        assert region.polygon.shape[1] == 2

    def test_insufficient_samples(self):
        s = stub_summary(np.zeros((5, 2, 2)))
        with pytest.raises(InsufficientSamplesError):
            predictive_region(s, 0)

    def test_bad_level(self, benchmark_fit):
        _, summary = benchmark_fit
        with pytest.raises(ValueError):
            predictive_region(summary, 0, level=1.5)

    def test_observation_noise_toggle_widens(self):
        rng = np.random.default_rng(6)
        eta = rng.normal(scale=0.05, size=(2000, 1, 2))
        s = stub_summary(eta, alpha_samples=np.full(2000, 8.0))
        narrow = predictive_region(s, 0, level=0.9)
        wide = predictive_region(s, 0, level=0.9, include_obs_noise=True)
        assert wide.coverage_fraction > narrow.coverage_fraction


class TestSigmaWithinChain:
    def test_gibbs_conditional_matches_closed_form(self):
        # freeze everything except sigma; the chain's sigma marginal must
        # match direct draws from the closed-form conditional
        bench = make_benchmark(n_rows=3, n_cols=3, frac=1.0, seed=12)
        cfg = ChainConfig(
            n_samples=4000, burn_in=200, thin=1, seed=14,
            update_xbeta=False, update_alpha=False, update_kappa=False,
            update_scales=False,
        )
        sampler = ChainSampler(bench["model"], bench["obs"], cfg)
        rng = np.random.default_rng(77)
        sampler.state.x = bench["truth"]["x"].copy()
        sampler._refresh_eta_cache()
        summary = sampler.run()
        chain_draws = summary.sigma_samples

        from compfield.gmrf import build_scalar_precision, sigma_gibbs_conditional

        q = build_scalar_precision(bench["graph"], sampler.state.kappa)
        direct = np.array([
            sigma_gibbs_conditional(bench["truth"]["x"], q, 4.0, np.eye(2), rng)
            for _ in range(4000)
        ])
        from scipy.stats import ks_2samp

        for i, j in ((0, 0), (0, 1), (1, 1)):
            stat, p = ks_2samp(chain_draws[:, i, j], direct[:, i, j])
            assert p > 0.01


class TestMultiChain:
    def test_merge_concatenates(self):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=15)
        cfg = ChainConfig(n_samples=200, burn_in=50, thin=5, seed=31)
        merged = run_chains(bench["model"], bench["obs"], cfg, n_chains=2, jobs=1)
        single = run_chain(bench["model"], bench["obs"], cfg)
        assert merged.eta_samples.shape[0] == 2 * single.eta_samples.shape[0]
        assert np.all(merged.z_mean >= 0)

    def test_merge_single_passthrough(self):
        bench = make_benchmark(n_rows=3, n_cols=3, seed=15)
        cfg = ChainConfig(n_samples=100, burn_in=20, thin=5, seed=31)
        s = run_chain(bench["model"], bench["obs"], cfg)
        assert merge_summaries([s]) is s


class TestEffectiveSampleSize:
    def test_iid_near_n(self):
        x = np.random.default_rng(0).normal(size=4000)
        ess = effective_sample_size(x)
        assert 2500 < ess <= 4000

    def test_correlated_much_smaller(self):
        rng = np.random.default_rng(1)
        x = np.zeros(4000)
        for i in range(1, 4000):
            x[i] = 0.95 * x[i - 1] + rng.normal()
        assert effective_sample_size(x) < 600

    def test_constant_series(self):
        assert effective_sample_size(np.ones(50)) == 50.0
