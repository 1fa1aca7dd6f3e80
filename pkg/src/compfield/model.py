"""Hierarchical model assembly: covariate design, priors, joint density.

The observation layer is Dirichlet with mean alr_inverse(eta) and
concentration alpha; the linear predictor is eta = B beta + X with a
horseshoe prior on the non-intercept rows of beta and a multivariate GMRF
prior on X. Densities are reported for the parameterization
(X, beta, log alpha, log kappa, sigma, lambda, tau).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import compositional as comp
from .errors import NumericError
from .gmrf import GmrfSpec, LatticeGraph, build_scalar_precision, field_logpdf, sample_field
from .linalg import SparseCholesky, inverse_wishart_logpdf, sample_inverse_wishart

__all__ = [
    "COVARIATE_PRESETS",
    "DesignMatrix",
    "Coefficients",
    "ModelState",
    "ObservationSet",
    "PriorConfig",
    "Model",
    "build_design",
    "linear_predictor",
    "log_likelihood",
    "log_posterior",
    "log_posterior_parts",
    "grad_log_posterior_xbeta",
    "simulate_dataset",
    "simulate_observations",
    "initial_state",
    "draw_state_from_prior",
]

# Covariate sets by preset name: intercept is always implied; every
# non-constant preset includes elevation plus at most one auxiliary
# land-cover composition.
COVARIATE_PRESETS = {
    "Constant": (),
    "Elevation": ("elevation",),
    "K-L_ESM": ("elevation", "K-L_ESM"),
    "K-L_RCA3": ("elevation", "K-L_RCA3"),
    "H-L_ESM": ("elevation", "H-L_ESM"),
    "H-L_RCA3": ("elevation", "H-L_RCA3"),
}


@dataclass
class DesignMatrix:
    """Covariate matrix with intercept first and standardized columns.

    Non-intercept columns are centered and scaled using moments of the
    observed cells only, so unobserved prediction cells cannot leak into
    the scaling. ``aux_compositions`` keeps the raw compositional
    covariates for predictor decomposition.
    """

    b: np.ndarray
    column_names: list
    offsets: np.ndarray
    scales: np.ndarray
    covariate_set: tuple
    aux_compositions: dict = field(default_factory=dict)
    aux_column_index: dict = field(default_factory=dict)

    @property
    def n_cells(self):
        return self.b.shape[0]

    @property
    def n_columns(self):
        return self.b.shape[1]


@dataclass
class Coefficients:
    """Regression coefficients with horseshoe scale auxiliaries.

    beta is p x (K-1); local_scales has one entry per non-intercept row
    (shared across the K-1 fields) and global_scale is the horseshoe tau.
    """

    beta: np.ndarray
    local_scales: np.ndarray
    global_scale: float = 1.0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.local_scales = np.asarray(self.local_scales, dtype=float)
        if self.local_scales.shape != (self.beta.shape[0] - 1,):
            raise ValueError("need one local scale per non-intercept row")
        if np.any(self.local_scales <= 0) or self.global_scale <= 0:
            raise ValueError("horseshoe scales must be strictly positive")

    def prior_sd(self, intercept_sd):
        """Per-row prior standard deviations, shape (p,)."""
        return np.concatenate(
            [[intercept_sd], self.local_scales * self.global_scale]
        )


@dataclass
class ModelState:
    """One MCMC state: latent field, coefficients, and hyperparameters."""

    x: np.ndarray
    coeffs: Coefficients
    alpha: float
    kappa: float
    sigma: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.alpha <= 0 or self.kappa <= 0:
            raise ValueError("alpha and kappa must be positive")

    def copy(self):
        return ModelState(
            x=self.x.copy(),
            coeffs=Coefficients(
                self.coeffs.beta.copy(),
                self.coeffs.local_scales.copy(),
                self.coeffs.global_scale,
            ),
            alpha=self.alpha,
            kappa=self.kappa,
            sigma=self.sigma.copy(),
        )


@dataclass
class ObservationSet:
    """Observed compositions at a subset of lattice cells."""

    cell_indices: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.cell_indices = np.asarray(self.cell_indices, dtype=int)
        self.y = np.asarray(self.y, dtype=float)
        if self.cell_indices.ndim != 1 or self.y.shape[0] != self.cell_indices.size:
            raise ValueError("cell_indices and y must align")
        if np.unique(self.cell_indices).size != self.cell_indices.size:
            raise ValueError("duplicate observation cells")

    @property
    def n_obs(self):
        return self.cell_indices.size

    def subset(self, keep):
        return ObservationSet(self.cell_indices[keep], self.y[keep])


@dataclass
class PriorConfig:
    """Hyperprior settings; defaults are weakly informative and proper."""

    intercept_sd: float = 10.0
    log_alpha_mean: float = 0.0
    log_alpha_sd: float = 10.0
    log_kappa_mean: float = 0.0
    log_kappa_sd: float = 2.0
    sigma_df: float | None = None  # defaults to K + 1 at model assembly
    sigma_scale: np.ndarray | None = None  # defaults to identity

    def resolved(self, n_fields):
        df = self.sigma_df if self.sigma_df is not None else n_fields + 2.0
        scale = (
            np.asarray(self.sigma_scale, dtype=float)
            if self.sigma_scale is not None
            else np.eye(n_fields)
        )
        return replace(self, sigma_df=df, sigma_scale=scale)


@dataclass
class Model:
    """Assembled model: lattice, design, priors, number of categories."""

    graph: LatticeGraph
    design: DesignMatrix
    priors: PriorConfig
    n_categories: int = 3

    def __post_init__(self):
        if self.design.n_cells != self.graph.n:
            raise ValueError("design and lattice sizes differ")
        self.priors = self.priors.resolved(self.n_categories - 1)

    @property
    def n_fields(self):
        return self.n_categories - 1


def _standardize(values, observed_mask, name):
    mu = float(np.mean(values[observed_mask]))
    sd = float(np.std(values[observed_mask]))
    if not np.isfinite(sd) or sd <= 0:
        raise ValueError(f"covariate {name!r} is constant over observed cells")
    return (values - mu) / sd, mu, sd


def build_design(grid, covariate_set, n_categories=3, alr_aux=True):
    """Build the design matrix for a covariate set (preset names allowed).

    Scalar covariates contribute one standardized column each; auxiliary
    compositional covariates contribute K-1 columns, alr-transformed by
    default (``alr_aux=False`` uses the first K-1 raw proportions instead).

    ``grid`` must provide ``n_cells``, ``observed_mask`` and a
    ``covariates`` mapping of name -> (n,) or (n, K) array.
    """
    if isinstance(covariate_set, str):
        if covariate_set not in COVARIATE_PRESETS:
            raise ValueError(f"unknown preset {covariate_set!r}")
        covariate_set = COVARIATE_PRESETS[covariate_set]
    covariate_set = tuple(covariate_set)
    n = grid.n_cells
    mask = np.asarray(grid.observed_mask, dtype=bool)
    cols = [np.ones(n)]
    names = ["intercept"]
    offsets = [0.0]
    scales = [1.0]
    aux_compositions = {}
    aux_column_index = {}
    for name in covariate_set:
        if name not in grid.covariates:
            raise ValueError(f"covariate {name!r} not present on the grid")
        values = np.asarray(grid.covariates[name], dtype=float)
        if np.any(~np.isfinite(values)):
            bad = int(np.sum(~np.isfinite(values).reshape(n, -1).all(axis=1)))
            raise ValueError(
                f"covariate {name!r} has missing values at {bad} cells of the domain"
            )
        if values.ndim == 1:
            std, mu, sd = _standardize(values, mask, name)
            cols.append(std)
            names.append(name)
            offsets.append(mu)
            scales.append(sd)
        elif values.ndim == 2:
            if np.any(values <= 0):
                raise ValueError(
                    f"compositional covariate {name!r} must be strictly positive "
                    "(apply zero-replacement first)"
                )
            enc = comp.alr_forward(values) if alr_aux else values[:, :-1]
            start = len(cols)
            for j in range(enc.shape[1]):
                label = f"{name}[{'alr' if alr_aux else 'raw'}{j + 1}]"
                std, mu, sd = _standardize(enc[:, j], mask, label)
                cols.append(std)
                names.append(label)
                offsets.append(mu)
                scales.append(sd)
            aux_compositions[name] = values
            aux_column_index[name] = list(range(start, len(cols)))
        else:
            raise ValueError(f"covariate {name!r} has unsupported shape {values.shape}")
    return DesignMatrix(
        b=np.column_stack(cols),
        column_names=names,
        offsets=np.asarray(offsets),
        scales=np.asarray(scales),
        covariate_set=covariate_set,
        aux_compositions=aux_compositions,
        aux_column_index=aux_column_index,
    )


def linear_predictor(design, coeffs, x):
    """eta = B beta + X, shape (n, K-1)."""
    b = design.b if isinstance(design, DesignMatrix) else np.asarray(design)
    beta = coeffs.beta if isinstance(coeffs, Coefficients) else np.asarray(coeffs)
    x = np.asarray(x, dtype=float)
    if b.shape[1] != beta.shape[0] or x.shape != (b.shape[0], beta.shape[1]):
        raise ValueError("linear predictor dimensions do not conform")
    return b @ beta + x


def _eta_observed(state, obs, design):
    b_obs = design.b[obs.cell_indices]
    return b_obs @ state.coeffs.beta + state.x[obs.cell_indices]


def log_likelihood(state, obs, design):
    """Sum of Dirichlet log-densities over observed cells."""
    eta = _eta_observed(state, obs, design)
    return comp.dirichlet_logpdf_eta(obs.y, eta, state.alpha)


def _halfcauchy_logpdf(s):
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        return -np.inf
    return float(np.sum(np.log(2.0 / np.pi) - np.log1p(s**2)))


def _normal_logpdf(v, mean, sd):
    v = np.asarray(v, dtype=float)
    return float(np.sum(-0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * ((v - mean) / sd) ** 2))


def log_posterior_parts(state, obs, design, graph, priors, q_factor=None):
    """Per-block log-density terms as a dict (sums to the log-posterior).

    Any block that fails or comes out non-finite (other than a -inf
    likelihood, which is a legitimate zero-density state) raises a
    NumericError naming the block.
    """
    priors = priors.resolved(state.x.shape[1])
    beta = state.coeffs.beta
    row_sd = state.coeffs.prior_sd(priors.intercept_sd)
    blocks = {
        "likelihood": lambda: log_likelihood(state, obs, design),
        "field": lambda: field_logpdf(
            state.x, GmrfSpec(state.kappa, state.sigma, graph), q_factor=q_factor
        ),
        "beta": lambda: _normal_logpdf(beta, 0.0, row_sd[:, None]),
        "scales": lambda: _halfcauchy_logpdf(state.coeffs.local_scales)
        + _halfcauchy_logpdf(state.coeffs.global_scale),
        "log_alpha": lambda: _normal_logpdf(
            np.log(state.alpha), priors.log_alpha_mean, priors.log_alpha_sd
        ),
        "log_kappa": lambda: _normal_logpdf(
            np.log(state.kappa), priors.log_kappa_mean, priors.log_kappa_sd
        ),
        "sigma": lambda: inverse_wishart_logpdf(
            state.sigma, priors.sigma_df, priors.sigma_scale
        ),
    }
    parts = {}
    for name, fn in blocks.items():
        try:
            value = fn()
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise NumericError(f"log_posterior failed in block {name!r}: {exc}") from exc
        if not np.isfinite(value) and not (name == "likelihood" and value == -np.inf):
            raise NumericError(f"log_posterior non-finite in block {name!r}")
        parts[name] = value
    return parts


def log_posterior(state, obs, design, graph, priors, q_factor=None):
    """Joint log-density of the state given observations.

    Raises NumericError naming the offending block if any term is
    non-finite (the likelihood is allowed to be -inf).
    """
    parts = log_posterior_parts(state, obs, design, graph, priors, q_factor=q_factor)
    if parts["likelihood"] == -np.inf:
        return -np.inf
    return float(sum(parts.values()))


def grad_log_posterior_xbeta(state, obs, design, graph, priors, q_factor=None):
    """Gradient of the log-posterior w.r.t. (X, beta).

    Returns (grad_x, grad_beta) with shapes (n, K-1) and (p, K-1). Used by
    the MALA block; all other parameters enter only through their current
    values.
    """
    priors = priors.resolved(state.x.shape[1])
    eta = _eta_observed(state, obs, design)
    z = comp.alr_inverse(eta)
    score = comp.dirichlet_eta_score(obs.y, z, state.alpha)  # (m, K-1)

    qmat = (
        q_factor.matrix
        if q_factor is not None
        else build_scalar_precision(graph, state.kappa)
    )
    sigma_inv = np.linalg.inv(state.sigma)
    grad_x = -(qmat @ state.x) @ sigma_inv
    np.add.at(grad_x, obs.cell_indices, score)

    row_sd = state.coeffs.prior_sd(priors.intercept_sd)
    grad_beta = design.b[obs.cell_indices].T @ score
    grad_beta -= state.coeffs.beta / row_sd[:, None] ** 2
    return grad_x, grad_beta


def simulate_dataset(spec, design, beta_true, alpha_true, mask, rng):
    """Generate a synthetic dataset from known parameters.

    Draws X from the GMRF, forms eta = B beta + X and Z = alr_inverse(eta),
    and observes Y ~ Dirichlet(alpha Z) on the masked cells. Returns
    (ObservationSet, truth) where truth holds the full x, eta and z fields.
    """
    b = design.b if isinstance(design, DesignMatrix) else np.asarray(design)
    beta_true = np.asarray(beta_true, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b.shape[0],):
        raise ValueError("mask must have one flag per lattice cell")
    x = sample_field(spec, rng)
    eta = b @ beta_true + x
    z = comp.alr_inverse(eta)
    cells = np.flatnonzero(mask)
    y = comp.dirichlet_sample(z[cells], alpha_true, rng)
    obs = ObservationSet(cells, y)
    return obs, {"x": x, "eta": eta, "z": z}


def simulate_observations(state, design, cells, rng):
    """Redraw observations at given cells under the current state.

    Tolerates float-degenerate states (extreme predictors underflow z to
    the open-simplex boundary) so prior-predictive harnesses never crash.
    """
    b = design.b[cells]
    eta = b @ state.coeffs.beta + state.x[cells]
    z = np.clip(comp.alr_inverse(eta), 1e-300, None)
    g = np.maximum(rng.gamma(state.alpha * z), 1e-290)
    return g / g.sum(axis=-1, keepdims=True)


def initial_state(model, obs):
    """Deterministic feasible starting state.

    beta = 0 except the intercept row, set to the column means of the alr
    of the observed compositions; X = 0; alpha = 10; kappa = 1; sigma = I.
    """
    p = model.design.n_columns
    q = model.n_fields
    beta = np.zeros((p, q))
    beta[0] = comp.alr_forward(obs.y).mean(axis=0)
    coeffs = Coefficients(beta, np.ones(p - 1), 1.0)
    return ModelState(
        x=np.zeros((model.graph.n, q)),
        coeffs=coeffs,
        alpha=10.0,
        kappa=1.0,
        sigma=np.eye(q),
    )


def draw_state_from_prior(model, rng):
    """Forward draw of all parameters from their priors (simulation checks)."""
    priors = model.priors.resolved(model.n_fields)
    q = model.n_fields
    p = model.design.n_columns
    alpha = float(np.exp(rng.normal(priors.log_alpha_mean, priors.log_alpha_sd)))
    kappa = float(np.exp(rng.normal(priors.log_kappa_mean, priors.log_kappa_sd)))
    sigma = sample_inverse_wishart(priors.sigma_df, priors.sigma_scale, rng)
    # half-Cauchy via ratio of the absolute value of two standard normals
    local = np.abs(rng.standard_normal(p - 1)) / np.abs(rng.standard_normal(p - 1))
    tau = float(np.abs(rng.standard_normal()) / np.abs(rng.standard_normal()))
    coeffs = Coefficients(np.zeros((p, q)), np.maximum(local, 1e-12), max(tau, 1e-12))
    row_sd = coeffs.prior_sd(priors.intercept_sd)
    coeffs.beta = rng.standard_normal((p, q)) * row_sd[:, None]
    x = sample_field(GmrfSpec(kappa, sigma, model.graph), rng)
    return ModelState(x=x, coeffs=coeffs, alpha=alpha, kappa=kappa, sigma=sigma)
