"""Model comparison: k-fold cross-validation, DIC, and pairwise map distances."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import compositional as comp
from .errors import DataError
from .inference import reconstruct, run_chain

__all__ = [
    "CvPlan",
    "CvResult",
    "ComparisonReport",
    "make_folds",
    "cross_validate",
    "dic",
    "dic_components",
    "compare_maps",
]


@dataclass
class CvPlan:
    """Random balanced partition of observations into folds."""

    n_folds: int
    assignments: np.ndarray
    seed: int


@dataclass
class CvResult:
    pooled_acd: float
    fold_acds: list
    predictions: np.ndarray
    truths: np.ndarray
    cells: np.ndarray


@dataclass
class ComparisonReport:
    names: list
    acd_matrix: np.ndarray
    reference_acd: np.ndarray = None
    n_cells_used: int = 0
    percell: dict = None


def make_folds(n_obs, n_folds=6, seed=0):
    """Uniform random partition; fold sizes differ by at most one."""
    if n_folds < 1 or n_folds > n_obs:
        raise ValueError(f"n_folds must be in [1, {n_obs}], got {n_folds}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_obs)
    assignments = np.empty(n_obs, dtype=int)
    assignments[order] = np.arange(n_obs) % n_folds
    return CvPlan(n_folds=n_folds, assignments=assignments, seed=seed)


def _fold_config(config, fold, chain_factor):
    n = max(200, int(round(config.n_samples * chain_factor)))
    burn = min(n - 1, max(50, int(round(config.burn_in * chain_factor))))
    child_seed = int(np.random.SeedSequence([config.seed, 811, fold]).generate_state(1)[0])
    return replace(config, n_samples=n, burn_in=burn, seed=child_seed,
                   checkpoint_every=0, progress=None)


def cross_validate(model, obs, config, plan, chain_factor=0.25, jobs=1):
    """Refit per fold on the complement and score held-out predictions.

    Returns a CvResult whose pooled_acd is the RMS Aitchison distance over
    all held-out (prediction, truth) pairs; per-fold ACDs are also kept.
    Fold chains reuse the full-fit configuration shortened by
    ``chain_factor``.
    """
    tasks = []
    for fold in range(plan.n_folds):
        held = plan.assignments == fold
        if not np.any(~held):
            raise ValueError(f"fold {fold}: training complement is empty")
        tasks.append((model, obs.subset(~held), _fold_config(config, fold, chain_factor)))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(run_chain, *zip(*tasks)))
    else:
        summaries = [run_chain(*t) for t in tasks]

    preds, truths, cells, fold_acds = [], [], [], []
    for fold, summary in enumerate(summaries):
        held = plan.assignments == fold
        zmap = reconstruct(summary)
        held_cells = obs.cell_indices[held]
        p, t = zmap[held_cells], obs.y[held]
        preds.append(p)
        truths.append(t)
        cells.append(held_cells)
        fold_acds.append(comp.average_compositional_distance(p, t))
    preds = np.concatenate(preds)
    truths = np.concatenate(truths)
    return CvResult(
        pooled_acd=comp.average_compositional_distance(preds, truths),
        fold_acds=fold_acds,
        predictions=preds,
        truths=truths,
        cells=np.concatenate(cells),
    )


def dic_components(summary, model, obs):
    """Deviance pieces: posterior-mean deviance, plug-in deviance, p_D.

    The plug-in evaluates the likelihood at the posterior means of eta and
    alpha (the unconstrained scale), so p_D = Dbar - D(eta_bar, alpha_bar).
    """
    if summary.loglik_samples.size < 1:
        raise ValueError("summary holds no retained likelihood evaluations")
    dbar = float(np.mean(-2.0 * summary.loglik_samples))
    eta_bar = summary.eta_samples.mean(axis=0)[obs.cell_indices]
    alpha_bar = float(np.mean(summary.alpha_samples))
    dhat = -2.0 * comp.dirichlet_logpdf_eta(obs.y, eta_bar, alpha_bar)
    p_d = dbar - dhat
    return {"dbar": dbar, "dhat": dhat, "p_d": p_d, "dic": dbar + p_d}


def dic(summary, model, obs):
    """Deviance information criterion (lower is better)."""
    return dic_components(summary, model, obs)["dic"]


def compare_maps(maps, reference=None, require_all=True):
    """Pairwise ACD matrix between named composition maps.

    ``maps`` is an ordered mapping name -> (n, K) array; distances use only
    cells with finite values in every map (and the reference, if given).
    Returns a ComparisonReport with the symmetric matrix, the optional ACD
    of each map to the reference, and per-cell distance fields for
    rendering.
    """
    names = list(maps)
    if len(names) < 1:
        raise ValueError("no maps to compare")
    arrays = [np.asarray(maps[n], dtype=float) for n in names]
    shape = arrays[0].shape
    for n, a in zip(names, arrays):
        if a.shape != shape:
            raise DataError(f"map {n!r} has shape {a.shape}, expected {shape}")
    stack = list(arrays)
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        if reference.shape != shape:
            raise DataError(f"reference map has shape {reference.shape}, expected {shape}")
        stack = stack + [reference]
    common = np.all([np.all(np.isfinite(a) & (a > 0), axis=1) for a in stack], axis=0)
    if require_all and not np.any(common):
        raise DataError("no cells are present in all maps")
    m = len(names)
    acd = np.zeros((m, m))
    percell = {}
    for i in range(m):
        for j in range(i + 1, m):
            d = np.full(shape[0], np.nan)
            d[common] = comp.aitchison_distance(arrays[i][common], arrays[j][common])
            acd[i, j] = acd[j, i] = float(np.sqrt(np.nanmean(d[common] ** 2)))
            percell[(names[i], names[j])] = d
    ref_acd = None
    if reference is not None:
        ref_acd = np.empty(m)
        for i in range(m):
            d = np.full(shape[0], np.nan)
            d[common] = comp.aitchison_distance(arrays[i][common], reference[common])
            ref_acd[i] = float(np.sqrt(np.nanmean(d[common] ** 2)))
            percell[(names[i], "reference")] = d
    return ComparisonReport(
        names=names,
        acd_matrix=acd,
        reference_acd=ref_acd,
        n_cells_used=int(common.sum()),
        percell=percell,
    )
