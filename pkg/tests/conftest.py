"""Shared fixtures: synthetic benchmark datasets and short reference fits."""

import numpy as np
import pytest

from compfield.gmrf import GmrfSpec, LatticeGraph
from compfield.inference import ChainConfig, run_chain
from compfield.io import LatticeGrid
from compfield.model import Model, PriorConfig, build_design, simulate_dataset

BETA_TRUE = np.array([[0.3, -0.2], [0.8, -0.5]])
SIGMA_TRUE = np.array([[0.4, 0.1], [0.1, 0.4]])


def make_benchmark(n_rows=10, n_cols=10, frac=0.6, alpha=50.0, kappa=1.0,
                   seed=42, beta_true=None, sigma_true=None, extra_covariates=None):
    """Small synthetic dataset with an elevation-like covariate."""
    rng = np.random.default_rng(seed)
    grid = LatticeGrid(n_rows=n_rows, n_cols=n_cols, lon0=0.5, lat0=50.5,
                       resolution=1.0)
    graph = LatticeGraph(n_rows, n_cols)
    lon, lat = grid.lons(), grid.lats()
    elev = (
        1200.0 * np.exp(-((lon - lon.mean() * 0.7) ** 2 + (lat - lat.mean()) ** 2) / 18.0)
        + 800.0 * np.exp(-((lon - lon.mean() * 1.3) ** 2 + (lat - lat.mean() - 2) ** 2) / 40.0)
    )
    grid.covariates = {"elevation": elev}
    if extra_covariates:
        grid.covariates.update(extra_covariates(rng, grid))
    mask = rng.random(grid.n_cells) < frac
    if not mask.any():
        mask[0] = True
    grid.observed_mask = mask
    design = build_design(grid, ("elevation",))
    beta_true = BETA_TRUE if beta_true is None else beta_true
    sigma_true = SIGMA_TRUE if sigma_true is None else sigma_true
    spec = GmrfSpec(kappa, sigma_true, graph)
    obs, truth = simulate_dataset(spec, design, beta_true, alpha, mask, rng)
    model = Model(graph=graph, design=design, priors=PriorConfig())
    return {
        "grid": grid, "graph": graph, "design": design, "model": model,
        "obs": obs, "truth": truth, "beta_true": beta_true,
        "sigma_true": sigma_true, "alpha_true": alpha, "kappa_true": kappa,
    }


@pytest.fixture(scope="session")
def benchmark():
    return make_benchmark()


@pytest.fixture(scope="session")
def benchmark_fit(benchmark):
    """One shared short fit of the benchmark (several tests read it)."""
    config = ChainConfig(n_samples=4000, burn_in=1000, thin=5, seed=11)
    summary = run_chain(benchmark["model"], benchmark["obs"], config)
    return benchmark, summary
