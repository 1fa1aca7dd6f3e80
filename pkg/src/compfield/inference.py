"""Blocked MCMC engine and posterior summaries.

One sweep updates, in fixed order:

  (a) a joint MALA move on (X, beta), preconditioned by the prior precision
      plus a diagonal likelihood-curvature (expected information) estimate;
  (b) an adaptive random walk on log alpha;
  (c) an adaptive random walk on log kappa (the field precision is rebuilt
      and refactored on acceptance);
  (d) an exact inverse-Wishart Gibbs draw of sigma;
  (e) Gibbs draws of the horseshoe scales through their auxiliary
      inverse-gamma representation.

Step sizes and the preconditioner adapt during burn-in only; the kernel is
fixed afterwards. A single ``numpy.random.Generator`` drives everything, so
a given (seed, config) reproduces traces bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.stats import chi2

from . import compositional as comp
from .errors import InsufficientSamplesError, NumericError
from .gmrf import build_scalar_precision, scalar_precision_logdet
from .linalg import SparseCholesky, sample_inverse_wishart
from .model import Model, ModelState, ObservationSet, initial_state

__all__ = [
    "ChainConfig",
    "PosteriorSummary",
    "PredictiveRegion",
    "ChainSampler",
    "run_chain",
    "run_chains",
    "resume_chain",
    "merge_summaries",
    "reconstruct",
    "decompose_predictor",
    "predictive_region",
    "effective_sample_size",
]

#: ternary triangle vertices for categories 1..3 (unit side length)
TERNARY_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0]])


@dataclass
class ChainConfig:
    """MCMC run settings. Defaults follow the production configuration
    (100k samples, 10k burn-in, thin 10)."""

    n_samples: int = 100_000
    burn_in: int = 10_000
    thin: int = 10
    seed: int = 0
    adapt_window: int = 50
    mala_target: float = 0.57
    rw_target: float = 0.44
    mala_step: float = 0.5
    alpha_step: float = 0.3
    kappa_step: float = 0.3
    precond_refresh: int = 25
    precond_mode: str = "frozen"  # "frozen" | "conditioning"
    adapt: bool = True
    update_xbeta: bool = True
    update_alpha: bool = True
    update_kappa: bool = True
    update_sigma: bool = True
    update_scales: bool = True
    progress: object = None  # callable(iteration, log_posterior, accept_rates)
    progress_every: int = 500
    checkpoint_every: int = 0
    checkpoint_path: object = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not 0 <= self.burn_in < self.n_samples:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_samples")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.precond_mode not in ("frozen", "conditioning"):
            raise ValueError("precond_mode must be 'frozen' or 'conditioning'")


@dataclass
class PosteriorSummary:
    """Retained samples, traces, and derived posterior quantities."""

    z_mean: np.ndarray
    eta_samples: np.ndarray
    alpha_samples: np.ndarray
    kappa_samples: np.ndarray
    sigma_samples: np.ndarray
    beta_samples: np.ndarray
    loglik_samples: np.ndarray
    traces: dict
    acceptance: dict
    ess: dict
    config: ChainConfig
    n_categories: int
    column_names: list
    elapsed_seconds: float = 0.0

    @property
    def n_retained(self):
        return self.eta_samples.shape[0]


@dataclass
class PredictiveRegion:
    """Credible region for one cell's composition on the ternary triangle."""

    cell: int
    level: float
    polygon: np.ndarray
    coverage_fraction: float


def _ig_draw(rng, shape, rate, size=None):
    # X ~ InvGamma(shape, rate): rate / Gamma(shape, 1)
    return rate / rng.gamma(shape, 1.0, size=size)


class ChainSampler:
    """Mutable sampler driving one chain; see module docstring for the sweep."""

    def __init__(self, model: Model, obs: ObservationSet, config: ChainConfig,
                 state: ModelState | None = None, rng=None):
        if obs.n_obs < 1:
            raise ValueError("at least one observed cell is required")
        if obs.cell_indices.max() >= model.graph.n:
            raise ValueError("observation cell index outside the lattice")
        self.model = model
        self.obs = obs
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.state = state if state is not None else initial_state(model, obs)
        self.priors = model.priors
        p = model.design.n_columns
        self.aux_nu = np.ones(p - 1)
        self.aux_xi = 1.0
        self.iteration = 0

        self.log_step = {
            "xbeta": np.log(config.mala_step),
            "alpha": np.log(config.alpha_step),
            "kappa": np.log(config.kappa_step),
        }
        # Polyak average of the adapting step over late burn-in; the frozen
        # post-burn-in step uses this to avoid freezing at a noisy value
        self._step_sum = {k: 0.0 for k in self.log_step}
        self._step_count = {k: 0 for k in self.log_step}
        self.accept = {k: 0 for k in ("xbeta", "alpha", "kappa")}
        self.tries = {k: 0 for k in ("xbeta", "alpha", "kappa")}
        self.accept_post = {k: 0 for k in ("xbeta", "alpha", "kappa")}
        self.tries_post = {k: 0 for k in ("xbeta", "alpha", "kappa")}

        self._b_obs = model.design.b[obs.cell_indices]
        # curvature reference: observed compositions (a data constant), so the
        # preconditioner never depends on the chain state
        self._z_ref = np.clip(obs.y, 1e-6, None)
        self._z_ref /= self._z_ref.sum(axis=1, keepdims=True)

        self._refresh_kappa_cache()
        self._refresh_sigma_cache()
        self._refresh_eta_cache()
        if not np.isfinite(self._loglik):
            raise NumericError("non-finite posterior at initialization")
        self._precond = None
        self._rebuild_preconditioner()
        self._alloc_storage()

    # ------------------------------------------------------------------ caches

    def _refresh_kappa_cache(self):
        self._q = build_scalar_precision(self.model.graph, self.state.kappa)
        self._q_logdet = scalar_precision_logdet(self.model.graph, self.state.kappa)

    def _refresh_sigma_cache(self):
        sign, logdet = np.linalg.slogdet(self.state.sigma)
        if sign <= 0:
            raise NumericError("sigma left the positive-definite cone")
        self._sigma_logdet = float(logdet)
        self._sigma_inv = np.linalg.inv(self.state.sigma)

    def _refresh_eta_cache(self):
        self._eta_obs = self._b_obs @ self.state.coeffs.beta + self.state.x[self.obs.cell_indices]
        self._loglik = comp.dirichlet_logpdf_eta(self.obs.y, self._eta_obs, self.state.alpha)

    def set_observations(self, y):
        """Replace observation values in place (simulation harnesses)."""
        self.obs.y = np.asarray(y, dtype=float)
        self._z_ref = np.clip(self.obs.y, 1e-6, None)
        self._z_ref /= self._z_ref.sum(axis=1, keepdims=True)
        self._refresh_eta_cache()

    def _field_quad(self, x=None, qmat=None, sigma_inv=None):
        x = self.state.x if x is None else x
        qmat = self._q if qmat is None else qmat
        sigma_inv = self._sigma_inv if sigma_inv is None else sigma_inv
        return float(np.einsum("ij,ji->", sigma_inv, x.T @ (qmat @ x)))

    def _row_sd(self):
        return self.state.coeffs.prior_sd(self.priors.intercept_sd)

    # --------------------------------------------------------------- densities

    def _xbeta_logdens(self, x, beta, eta_obs=None):
        """Terms of the log-posterior that involve (X, beta); also returns
        the observed-cell predictor and likelihood for cache reuse."""
        if eta_obs is None:
            eta_obs = self._b_obs @ beta + x[self.obs.cell_indices]
        ll = comp.dirichlet_logpdf_eta(self.obs.y, eta_obs, self.state.alpha)
        quad = self._field_quad(x=x)
        row_sd = self._row_sd()
        bprior = -0.5 * float(np.sum((beta / row_sd[:, None]) ** 2))
        return ll + (-0.5 * quad) + bprior, eta_obs, ll

    def log_posterior(self):
        """Full log-posterior at the current state, using cached factors."""
        n, q = self.state.x.shape
        quad = self._field_quad()
        fieldterm = -0.5 * (
            n * q * np.log(2.0 * np.pi) - q * self._q_logdet
            + n * self._sigma_logdet + quad
        )
        row_sd = self._row_sd()
        beta = self.state.coeffs.beta
        bterm = float(
            np.sum(-0.5 * np.log(2.0 * np.pi) - np.log(row_sd[:, None]) - 0.5 * (beta / row_sd[:, None]) ** 2)
        )
        sc = self.state.coeffs
        scaleterm = float(
            np.sum(np.log(2.0 / np.pi) - np.log1p(sc.local_scales**2))
            + np.log(2.0 / np.pi) - np.log1p(sc.global_scale**2)
        )
        pr = self.priors
        la, lk = np.log(self.state.alpha), np.log(self.state.kappa)
        hyper = (
            -0.5 * np.log(2.0 * np.pi) - np.log(pr.log_alpha_sd)
            - 0.5 * ((la - pr.log_alpha_mean) / pr.log_alpha_sd) ** 2
            - 0.5 * np.log(2.0 * np.pi) - np.log(pr.log_kappa_sd)
            - 0.5 * ((lk - pr.log_kappa_mean) / pr.log_kappa_sd) ** 2
        )
        from .linalg import inverse_wishart_logpdf

        hyper += inverse_wishart_logpdf(self.state.sigma, pr.sigma_df, pr.sigma_scale)
        return self._loglik + fieldterm + bterm + scaleterm + float(hyper)

    def _grad_xbeta(self, x, beta, eta_obs):
        z = comp.alr_inverse(eta_obs)
        score = comp.dirichlet_eta_score(self.obs.y, z, self.state.alpha)
        grad_x = -(self._q @ x) @ self._sigma_inv
        np.add.at(grad_x, self.obs.cell_indices, score)
        row_sd = self._row_sd()
        grad_beta = self._b_obs.T @ score - beta / row_sd[:, None] ** 2
        return grad_x, grad_beta

    # ----------------------------------------------------------- preconditioner

    def _rebuild_preconditioner(self):
        """Snapshot the conditioning values and build M from them.

        Curvature never depends on the chain's own (X, beta), so the MALA
        kernel stays valid in both frozen and per-sweep rebuild modes.
        """
        self._precond_inputs = {
            "alpha": self.state.alpha,
            "kappa": self.state.kappa,
            "sigma_inv": self._sigma_inv.copy(),
            "row_sd": self._row_sd().copy(),
        }
        self._build_precond_from(self._precond_inputs)

    def _build_precond_from(self, inputs):
        """Block-diagonal M = prior precision + diagonal curvature estimate.

        Curvature is the expected Dirichlet information at the observed
        compositions scaled by the snapshot alpha; the X-block couples
        fields through kron(sigma^{-1}, Q(kappa)) at the snapshot values.
        """
        n = self.model.graph.n
        q = self.model.n_fields
        fisher = comp.dirichlet_eta_fisher_diag(self._z_ref, inputs["alpha"])  # (m, q)
        dx = np.zeros((n, q))
        dx[self.obs.cell_indices] = fisher
        q_pc = (
            self._q
            if inputs["kappa"] == self.state.kappa
            else build_scalar_precision(self.model.graph, inputs["kappa"])
        )
        m_x = sp.kron(sp.csc_matrix(inputs["sigma_inv"]), q_pc, format="csc") + sp.diags(
            dx.ravel(order="F")
        )
        prior_prec = np.tile(1.0 / inputs["row_sd"] ** 2, (q, 1)).T  # (p, q)
        lik_prec = (self._b_obs**2).T @ fisher  # (p, q)
        self._precond = {
            "factor": SparseCholesky(m_x.tocsc()),
            "beta_diag": (prior_prec + lik_prec).ravel(order="F"),
        }

    def _m_solve(self, gx_flat, gb_flat):
        return (
            self._precond["factor"].solve(gx_flat),
            gb_flat / self._precond["beta_diag"],
        )

    def _m_sample(self):
        vx = self._precond["factor"].sample(self.rng)
        vb = self.rng.standard_normal(self._precond["beta_diag"].size) / np.sqrt(
            self._precond["beta_diag"]
        )
        return vx, vb

    def _m_quad(self, dx_flat, db_flat):
        mf = self._precond["factor"].matrix
        return float(dx_flat @ (mf @ dx_flat)) + float(
            db_flat @ (self._precond["beta_diag"] * db_flat)
        )

    # ------------------------------------------------------------------ blocks

    def _adapt(self, block, accept_prob, target):
        if not (self.config.adapt and self.iteration < self.config.burn_in):
            return
        rate = (1.0 + self.iteration / self.config.adapt_window) ** -0.6
        self.log_step[block] += rate * (accept_prob - target)
        if self.iteration >= self.config.burn_in // 2:
            self._step_sum[block] += self.log_step[block]
            self._step_count[block] += 1

    def _record_accept(self, block, accepted):
        self.tries[block] += 1
        self.accept[block] += accepted
        if self.iteration >= self.config.burn_in:
            self.tries_post[block] += 1
            self.accept_post[block] += accepted

    def _step_xbeta(self):
        n, q = self.state.x.shape
        x, beta = self.state.x, self.state.coeffs.beta
        eps = np.exp(self.log_step["xbeta"])
        lp_cur, _, _ = self._xbeta_logdens(x, beta, eta_obs=self._eta_obs)
        gx, gb = self._grad_xbeta(x, beta, self._eta_obs)
        gxf, gbf = gx.ravel(order="F"), gb.ravel(order="F")
        sx, sb = self._m_solve(gxf, gbf)
        mean_fwd_x = x.ravel(order="F") + 0.5 * eps**2 * sx
        mean_fwd_b = beta.ravel(order="F") + 0.5 * eps**2 * sb
        nx, nb = self._m_sample()
        prop_x_f = mean_fwd_x + eps * nx
        prop_b_f = mean_fwd_b + eps * nb
        x_p = prop_x_f.reshape(n, q, order="F")
        b_p = prop_b_f.reshape(beta.shape, order="F")

        if np.all(np.isfinite(prop_x_f)) and np.all(np.isfinite(prop_b_f)):
            lp_prop, eta_p, ll_p = self._xbeta_logdens(x_p, b_p)
        else:
            lp_prop, eta_p, ll_p = -np.inf, None, None
        if np.isfinite(lp_prop):
            gx_p, gb_p = self._grad_xbeta(x_p, b_p, eta_p)
            sx_p, sb_p = self._m_solve(gx_p.ravel(order="F"), gb_p.ravel(order="F"))
            mean_rev_x = prop_x_f + 0.5 * eps**2 * sx_p
            mean_rev_b = prop_b_f + 0.5 * eps**2 * sb_p
            dq = -0.5 / eps**2 * (
                self._m_quad(x.ravel(order="F") - mean_rev_x, beta.ravel(order="F") - mean_rev_b)
                - self._m_quad(prop_x_f - mean_fwd_x, prop_b_f - mean_fwd_b)
            )
            log_r = lp_prop - lp_cur + dq
        else:
            log_r = -np.inf
        a = float(np.exp(min(0.0, log_r))) if np.isfinite(log_r) else 0.0
        accepted = self.rng.random() < a
        if accepted:
            self.state.x = x_p
            self.state.coeffs.beta = b_p
            self._eta_obs = eta_p
            self._loglik = ll_p
        self._record_accept("xbeta", accepted)
        self._adapt("xbeta", a, self.config.mala_target)

    def _step_alpha(self):
        pr = self.priors
        la = np.log(self.state.alpha)
        la_p = la + np.exp(self.log_step["alpha"]) * self.rng.standard_normal()
        ll_p = comp.dirichlet_logpdf_eta(self.obs.y, self._eta_obs, float(np.exp(la_p)))
        log_r = (
            ll_p - self._loglik
            - 0.5 * ((la_p - pr.log_alpha_mean) / pr.log_alpha_sd) ** 2
            + 0.5 * ((la - pr.log_alpha_mean) / pr.log_alpha_sd) ** 2
        )
        a = float(np.exp(min(0.0, log_r))) if np.isfinite(log_r) else 0.0
        accepted = self.rng.random() < a
        if accepted:
            self.state.alpha = float(np.exp(la_p))
            self._loglik = ll_p
        self._record_accept("alpha", accepted)
        self._adapt("alpha", a, self.config.rw_target)

    def _step_kappa(self):
        pr = self.priors
        q_fields = self.model.n_fields
        lk = np.log(self.state.kappa)
        lk_p = lk + np.exp(self.log_step["kappa"]) * self.rng.standard_normal()
        kappa_p = float(np.exp(lk_p))
        if not np.isfinite(kappa_p) or kappa_p <= 0:
            # proposal outside the support: reject
            self._record_accept("kappa", False)
            self._adapt("kappa", 0.0, self.config.rw_target)
            return
        try:
            q_p = build_scalar_precision(self.model.graph, kappa_p)
            logdet_p = scalar_precision_logdet(self.model.graph, kappa_p)
        except NumericError as exc:
            raise NumericError(
                f"kappa block failed at iteration {self.iteration}: {exc}"
            ) from exc
        quad_cur = self._field_quad()
        quad_p = self._field_quad(qmat=q_p)
        log_r = (
            0.5 * q_fields * (logdet_p - self._q_logdet)
            - 0.5 * (quad_p - quad_cur)
            - 0.5 * ((lk_p - pr.log_kappa_mean) / pr.log_kappa_sd) ** 2
            + 0.5 * ((lk - pr.log_kappa_mean) / pr.log_kappa_sd) ** 2
        )
        a = float(np.exp(min(0.0, log_r))) if np.isfinite(log_r) else 0.0
        accepted = self.rng.random() < a
        if accepted:
            self.state.kappa = kappa_p
            self._q = q_p
            self._q_logdet = logdet_p
        self._record_accept("kappa", accepted)
        self._adapt("kappa", a, self.config.rw_target)

    def _step_sigma(self):
        pr = self.priors
        x = self.state.x
        s = pr.sigma_scale + x.T @ (self._q @ x)
        s = 0.5 * (s + s.T)
        try:
            self.state.sigma = sample_inverse_wishart(
                pr.sigma_df + self.model.graph.n, s, self.rng
            )
            self._refresh_sigma_cache()
        except NumericError as exc:
            raise NumericError(
                f"sigma block failed at iteration {self.iteration}: {exc}"
            ) from exc

    def _step_scales(self):
        coeffs = self.state.coeffs
        p = coeffs.beta.shape[0]
        if p < 2:
            return
        q = coeffs.beta.shape[1]
        b2 = coeffs.beta[1:] ** 2  # (p-1, q)
        tau2 = coeffs.global_scale**2
        lam2 = _ig_draw(
            self.rng,
            0.5 * (q + 1.0),
            1.0 / self.aux_nu + b2.sum(axis=1) / (2.0 * tau2),
            size=p - 1,
        )
        self.aux_nu = _ig_draw(self.rng, 1.0, 1.0 + 1.0 / lam2, size=p - 1)
        tau2 = _ig_draw(
            self.rng,
            0.5 * ((p - 1) * q + 1.0),
            1.0 / self.aux_xi + float((b2 / lam2[:, None]).sum()) / 2.0,
        )
        self.aux_xi = _ig_draw(self.rng, 1.0, 1.0 + 1.0 / tau2)
        coeffs.local_scales = np.sqrt(lam2)
        coeffs.global_scale = float(np.sqrt(tau2))

    # ------------------------------------------------------------------- sweep

    def step(self):
        """One full sweep over all enabled blocks."""
        cfg = self.config
        i = self.iteration
        # step-size adaptation must stop after burn-in, but the
        # preconditioner may refresh forever: it is a function of the
        # conditioning blocks only (never of X or beta), so the MALA kernel
        # stays a valid Metropolis-within-Gibbs update at every iteration.
        if i == cfg.burn_in and cfg.adapt:
            for k in self.log_step:
                if self._step_count[k]:
                    self.log_step[k] = self._step_sum[k] / self._step_count[k]
        if cfg.precond_mode == "conditioning":
            self._rebuild_preconditioner()
        elif i and i % cfg.precond_refresh == 0:
            self._rebuild_preconditioner()
        if cfg.update_xbeta:
            self._step_xbeta()
        if cfg.update_alpha:
            self._step_alpha()
        if cfg.update_kappa:
            self._step_kappa()
        if cfg.update_sigma:
            self._step_sigma()
        if cfg.update_scales:
            self._step_scales()
        self.iteration += 1

    # ----------------------------------------------------------------- storage

    def _alloc_storage(self):
        cfg = self.config
        n, q = self.model.graph.n, self.model.n_fields
        p = self.model.design.n_columns
        n_keep = len(range(cfg.burn_in, cfg.n_samples, cfg.thin))
        self._retained = 0
        self._eta_store = np.empty((n_keep, n, q))
        self._loglik_store = np.empty(n_keep)
        self.traces = {
            "loglik": np.empty(cfg.n_samples),
            "logpost": np.empty(cfg.n_samples),
            "alpha": np.empty(cfg.n_samples),
            "kappa": np.empty(cfg.n_samples),
            "sigma": np.empty((cfg.n_samples, q, q)),
            "beta": np.empty((cfg.n_samples, p, q)),
        }

    def _record(self):
        i = self.iteration - 1  # step() has already advanced the counter
        cfg = self.config
        self.traces["loglik"][i] = self._loglik
        self.traces["logpost"][i] = self.log_posterior()
        self.traces["alpha"][i] = self.state.alpha
        self.traces["kappa"][i] = self.state.kappa
        self.traces["sigma"][i] = self.state.sigma
        self.traces["beta"][i] = self.state.coeffs.beta
        if i >= cfg.burn_in and (i - cfg.burn_in) % cfg.thin == 0:
            k = self._retained
            self._eta_store[k] = self.model.design.b @ self.state.coeffs.beta + self.state.x
            self._loglik_store[k] = self._loglik
            self._retained += 1

    def acceptance_rates(self):
        rates = {}
        for k in self.tries:
            tries = self.tries_post[k] if self.tries_post[k] else self.tries[k]
            acc = self.accept_post[k] if self.tries_post[k] else self.accept[k]
            rates[k] = acc / tries if tries else float("nan")
        return rates

    def run(self):
        """Advance to n_samples, recording traces and checkpoints."""
        cfg = self.config
        t0 = time.perf_counter()
        while self.iteration < cfg.n_samples:
            self.step()
            self._record()
            i = self.iteration
            if cfg.progress is not None and i % cfg.progress_every == 0:
                cfg.progress(i, self.traces["logpost"][i - 1], self.acceptance_rates())
            if cfg.checkpoint_every and cfg.checkpoint_path and i % cfg.checkpoint_every == 0:
                self.save_checkpoint(cfg.checkpoint_path)
        if cfg.checkpoint_path:
            self.save_checkpoint(cfg.checkpoint_path)
        return self._summarize(time.perf_counter() - t0)

    def _summarize(self, elapsed):
        cfg = self.config
        keep = np.arange(cfg.burn_in, cfg.n_samples, cfg.thin)
        eta = self._eta_store[: self._retained]
        z_mean = reconstruct_from_eta(eta)
        retained_beta = self.traces["beta"][keep]
        ess = {
            "alpha": effective_sample_size(self.traces["alpha"][keep]),
            "kappa": effective_sample_size(self.traces["kappa"][keep]),
            "loglik": effective_sample_size(self.traces["loglik"][keep]),
        }
        return PosteriorSummary(
            z_mean=z_mean,
            eta_samples=eta,
            alpha_samples=self.traces["alpha"][keep].copy(),
            kappa_samples=self.traces["kappa"][keep].copy(),
            sigma_samples=self.traces["sigma"][keep].copy(),
            beta_samples=retained_beta.copy(),
            loglik_samples=self._loglik_store[: self._retained].copy(),
            traces=self.traces,
            acceptance=self.acceptance_rates(),
            ess=ess,
            config=cfg,
            n_categories=self.model.n_categories,
            column_names=list(self.model.design.column_names),
            elapsed_seconds=elapsed,
        )

    # -------------------------------------------------------------- checkpoint

    def save_checkpoint(self, path):
        """Serialize everything needed to resume bit-for-bit."""
        from . import io as cfio

        cfg = self.config
        st = self.state
        meta = {
            "iteration": self.iteration,
            "retained": self._retained,
            "rng_state": self.rng.bit_generator.state,
            "alpha": st.alpha,
            "kappa": st.kappa,
            "global_scale": st.coeffs.global_scale,
            "aux_xi": float(self.aux_xi),
            "log_step": dict(self.log_step),
            "step_sum": dict(self._step_sum),
            "step_count": dict(self._step_count),
            "accept": self.accept,
            "tries": self.tries,
            "accept_post": self.accept_post,
            "tries_post": self.tries_post,
            "shape": {
                "n": self.model.graph.n,
                "p": self.model.design.n_columns,
                "q": self.model.n_fields,
                "n_obs": self.obs.n_obs,
            },
            "precond_alpha": self._precond_inputs["alpha"],
            "precond_kappa": self._precond_inputs["kappa"],
            "config": {
                "n_samples": cfg.n_samples, "burn_in": cfg.burn_in, "thin": cfg.thin,
                "seed": cfg.seed,
            },
        }
        arrays = {
            "x": st.x,
            "beta": st.coeffs.beta,
            "local_scales": st.coeffs.local_scales,
            "aux_nu": np.atleast_1d(self.aux_nu),
            "sigma": st.sigma,
            "precond_sigma_inv": self._precond_inputs["sigma_inv"],
            "precond_row_sd": self._precond_inputs["row_sd"],
            "eta_store": self._eta_store[: self._retained],
            "loglik_store": self._loglik_store[: self._retained],
        }
        for name, tr in self.traces.items():
            arrays[f"trace_{name}"] = tr[: self.iteration]
        cfio.write_checkpoint(path, meta, arrays)

    @classmethod
    def from_checkpoint(cls, path, model, obs, config):
        """Rebuild a sampler mid-run from a checkpoint file."""
        from . import io as cfio
        from .model import Coefficients

        meta, arrays = cfio.read_checkpoint(path)
        shape = meta["shape"]
        if shape["n"] != model.graph.n or shape["p"] != model.design.n_columns:
            raise NumericError("checkpoint does not match the supplied model")
        coeffs = Coefficients(
            arrays["beta"], arrays["local_scales"], meta["global_scale"]
        )
        state = ModelState(
            x=arrays["x"], coeffs=coeffs, alpha=meta["alpha"],
            kappa=meta["kappa"], sigma=arrays["sigma"],
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        sampler = cls(model, obs, config, state=state, rng=rng)
        sampler.iteration = meta["iteration"]
        sampler._retained = meta["retained"]
        sampler.aux_nu = arrays["aux_nu"]
        sampler.aux_xi = meta["aux_xi"]
        sampler.log_step = dict(meta["log_step"])
        sampler._step_sum = dict(meta["step_sum"])
        sampler._step_count = {k: int(v) for k, v in meta["step_count"].items()}
        sampler.accept = {k: int(v) for k, v in meta["accept"].items()}
        sampler.tries = {k: int(v) for k, v in meta["tries"].items()}
        sampler.accept_post = {k: int(v) for k, v in meta["accept_post"].items()}
        sampler.tries_post = {k: int(v) for k, v in meta["tries_post"].items()}
        sampler._eta_store[: meta["retained"]] = arrays["eta_store"]
        sampler._loglik_store[: meta["retained"]] = arrays["loglik_store"]
        for name in sampler.traces:
            sampler.traces[name][: meta["iteration"]] = arrays[f"trace_{name}"]
        # rebuild M exactly as it was when the checkpoint was written
        sampler._precond_inputs = {
            "alpha": meta["precond_alpha"],
            "kappa": meta["precond_kappa"],
            "sigma_inv": arrays["precond_sigma_inv"],
            "row_sd": arrays["precond_row_sd"],
        }
        sampler._build_precond_from(sampler._precond_inputs)
        return sampler


def reconstruct_from_eta(eta_samples):
    """Posterior-mean composition per cell from retained eta samples."""
    eta_samples = np.asarray(eta_samples, dtype=float)
    if eta_samples.ndim != 3 or eta_samples.shape[0] < 1:
        raise InsufficientSamplesError("need at least one retained sample")
    z = comp.alr_inverse(eta_samples).mean(axis=0)
    return z / z.sum(axis=1, keepdims=True)


def reconstruct(summary):
    """Posterior expectation of Z per cell (mean of alr_inverse over samples)."""
    return reconstruct_from_eta(summary.eta_samples)


def run_chain(model, obs, config):
    """Run one MCMC chain and return its PosteriorSummary."""
    sampler = ChainSampler(model, obs, config)
    return sampler.run()


def resume_chain(path, model, obs, config):
    """Resume an interrupted chain from a checkpoint; equals the
    uninterrupted run bit for bit."""
    sampler = ChainSampler.from_checkpoint(path, model, obs, config)
    return sampler.run()


def run_chains(model, obs, config, n_chains=4, jobs=1):
    """Run several chains with independent derived seeds and merge them."""
    seeds = np.random.SeedSequence(config.seed).generate_state(n_chains)
    configs = [replace(config, seed=int(s)) for s in seeds]
    if jobs > 1 and n_chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            summaries = list(pool.map(run_chain, [model] * n_chains, [obs] * n_chains, configs))
    else:
        summaries = [run_chain(model, obs, c) for c in configs]
    return merge_summaries(summaries)


def merge_summaries(summaries):
    """Concatenate retained samples across chains."""
    if len(summaries) == 1:
        return summaries[0]
    first = summaries[0]
    eta = np.concatenate([s.eta_samples for s in summaries], axis=0)
    merged = PosteriorSummary(
        z_mean=reconstruct_from_eta(eta),
        eta_samples=eta,
        alpha_samples=np.concatenate([s.alpha_samples for s in summaries]),
        kappa_samples=np.concatenate([s.kappa_samples for s in summaries]),
        sigma_samples=np.concatenate([s.sigma_samples for s in summaries]),
        beta_samples=np.concatenate([s.beta_samples for s in summaries]),
        loglik_samples=np.concatenate([s.loglik_samples for s in summaries]),
        traces={k: np.concatenate([s.traces[k] for s in summaries]) for k in first.traces},
        acceptance={
            k: float(np.mean([s.acceptance[k] for s in summaries])) for k in first.acceptance
        },
        ess={
            k: float(np.sum([s.ess[k] for s in summaries])) for k in first.ess
        },
        config=first.config,
        n_categories=first.n_categories,
        column_names=first.column_names,
        elapsed_seconds=float(np.sum([s.elapsed_seconds for s in summaries])),
    )
    return merged


def decompose_predictor(summary, model):
    """Cumulative predictor stages as compositional maps (ordered list).

    Stages: (1) the raw auxiliary land-cover covariate, (2) the auxiliary
    columns scaled by posterior-mean beta, (3) the full mean structure
    B beta, and (4) the full predictor B beta + X evaluated at the
    posterior-mean eta. Models without an auxiliary composition return
    stages 3-4 only. Stage 4 uses alr_inverse of the posterior-mean eta,
    which differs slightly from the sample-mean reconstruction.
    """
    design = model.design
    beta_mean = summary.beta_samples.mean(axis=0)
    eta_mean = summary.eta_samples.mean(axis=0)
    stages = []
    if design.aux_column_index:
        first_aux = next(iter(design.aux_column_index))
        stages.append(("covariate", comp.closure(design.aux_compositions[first_aux])))
        cols = sorted(c for cols in design.aux_column_index.values() for c in cols)
        eta_aux = design.b[:, cols] @ beta_mean[cols]
        stages.append(("covariate_scaled", comp.alr_inverse(eta_aux)))
    stages.append(("mean_structure", comp.alr_inverse(design.b @ beta_mean)))
    stages.append(("full_predictor", comp.alr_inverse(eta_mean)))
    return stages


def _ternary_raster(raster_size):
    v = TERNARY_VERTICES
    xs = (np.arange(raster_size) + 0.5) / raster_size
    ys = (np.arange(raster_size) + 0.5) / raster_size * (np.sqrt(3.0) / 2.0)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    t = np.column_stack([v[0] - v[2], v[1] - v[2]])
    lam12 = np.linalg.solve(t, (pts - v[2]).T).T
    lam = np.column_stack([lam12, 1.0 - lam12.sum(axis=1)])
    inside = np.all(lam >= -1e-12, axis=1)
    return lam, inside


def predictive_region(summary, cell, level=0.95, include_obs_noise=False,
                      raster_size=512, rng=None):
    """Credible region of one cell's composition on the ternary triangle.

    Fits a bivariate Gaussian to the cell's retained eta samples
    (optionally adding Dirichlet observation noise per sample), maps the
    chi-square level set through the link, and rasterizes it on a
    raster_size^2 barycentric grid; coverage_fraction is the covered share
    of triangle raster cells.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if summary.n_categories != 3:
        raise ValueError("predictive regions are defined on the ternary triangle (K=3)")
    eta = summary.eta_samples[:, cell, :]
    if eta.shape[0] < 10:
        raise InsufficientSamplesError(
            f"predictive_region needs >= 10 samples, got {eta.shape[0]}"
        )
    if include_obs_noise:
        if rng is None:
            rng = np.random.default_rng([int(summary.config.seed), int(cell), 7])
        z = comp.alr_inverse(eta)
        g = rng.gamma(summary.alpha_samples[:, None] * z)
        g = np.maximum(g, 1e-290)
        ystar = g / g.sum(axis=1, keepdims=True)
        eta = comp.alr_forward(np.clip(ystar, 1e-12, None))
    m = eta.mean(axis=0)
    c = np.cov(eta, rowvar=False)
    c = np.atleast_2d(c) + 1e-15 * np.eye(2)
    thresh = float(chi2.ppf(level, df=2))
    c_inv = np.linalg.inv(c)

    lam, inside = _ternary_raster(raster_size)
    z_r = np.clip(lam, 1e-12, None)
    z_r /= z_r.sum(axis=1, keepdims=True)
    eta_r = np.log(z_r[:, :2]) - np.log(z_r[:, 2:])
    d = eta_r - m
    qf = np.einsum("ij,jk,ik->i", d, c_inv, d)
    covered = inside & (qf <= thresh)
    coverage = float(covered.sum() / inside.sum())

    theta = np.linspace(0.0, 2.0 * np.pi, 181)
    l_c = np.linalg.cholesky(c)
    ring = m + np.sqrt(thresh) * (l_c @ np.vstack([np.cos(theta), np.sin(theta)])).T
    z_ring = comp.alr_inverse(ring)
    polygon = z_ring @ TERNARY_VERTICES
    return PredictiveRegion(cell=int(cell), level=float(level),
                            polygon=polygon, coverage_fraction=coverage)


def effective_sample_size(x):
    """ESS via Geyer's initial positive sequence of autocorrelations.

    Autocorrelations come from an FFT so long correlation lengths (up to
    half the series) are accounted for honestly.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = float(xc @ xc) / n
    if var == 0:
        return float(n)
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: n // 2] / n
    rho = acov / acov[0]
    # sum consecutive pairs while they stay positive
    s = rho[0]
    lag = 1
    while lag + 1 < rho.size:
        pair = rho[lag] + rho[lag + 1]
        if pair <= 0:
            break
        s += 2.0 * pair
        lag += 2
    return float(n / max(s, 1e-12))
