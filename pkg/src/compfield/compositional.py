"""Simplex algebra: additive log-ratio link, Dirichlet observation layer,
and Aitchison (compositional) distances.

A composition is a vector of K nonnegative proportions summing to one.
All functions are vectorized over leading axes: compositions live on the
last axis (length K), log-ratio vectors on the last axis (length K-1).
Everything here is pure; random draws take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln, polygamma

__all__ = [
    "closure",
    "alr_inverse",
    "alr_forward",
    "dirichlet_logpdf",
    "dirichlet_sample",
    "aitchison_distance",
    "average_compositional_distance",
]

#: tolerance on "components sum to 1"
SUM_TOL = 1e-12

# gamma draws for tiny shape parameters underflow to exactly 0.0; clip so
# normalized draws stay inside the open simplex
_GAMMA_FLOOR = 1e-290


def closure(v):
    """Normalize positive vectors to unit sum along the last axis."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("closure requires finite nonnegative input")
    s = v.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("closure requires positive row sums")
    return v / s


def alr_inverse(eta):
    """Map log-ratio vectors back to compositions.

    The inverse additive log-ratio link appends an implicit zero for the
    reference (last) category and applies a max-stabilized softmax:

        z_k = exp(eta_k) / (1 + sum_i exp(eta_i))   k < K
        z_K = 1 / (1 + sum_i exp(eta_i))

    Parameters
    ----------
    eta : array, shape (..., K-1)
        Finite log-ratio coordinates.

    Returns
    -------
    z : array, shape (..., K)
        Compositions; rows sum to one within 1e-12.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 0:
        eta = eta[None]
    if not np.all(np.isfinite(eta)):
        raise ValueError("alr_inverse requires finite input")
    full = np.concatenate([eta, np.zeros(eta.shape[:-1] + (1,))], axis=-1)
    full -= full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def alr_forward(z):
    """Additive log-ratio transform, log(z_k / z_K) for k < K.

    Exact inverse of :func:`alr_inverse`. Requires strictly positive
    entries; apply zero-replacement first (see the io module).
    """
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 2:
        raise ValueError("compositions need at least two categories")
    if np.any(z <= 0):
        raise ValueError("alr_forward requires strictly positive entries")
    return np.log(z[..., :-1]) - np.log(z[..., -1:])


def _check_composition(z, name, tol=1e-8):
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError(f"{name} must have strictly positive entries")
    if np.any(np.abs(z.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{name} rows must sum to 1")
    return z


def dirichlet_logpdf(y, z, alpha):
    """Log-density of y under Dirichlet(alpha * z).

    The distribution has mean z and variance decreasing in the
    concentration alpha: V(Y_k) = z_k (1 - z_k) / (alpha + 1).

    Parameters
    ----------
    y, z : arrays, shape (..., K)
        Strictly positive compositions (evaluation point and mean).
    alpha : float
        Positive concentration.

    Returns
    -------
    float or array, shape (...)
    """
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError("alpha must be a positive finite scalar")
    y = _check_composition(y, "y")
    z = _check_composition(z, "z")
    a = alpha * z
    lp = gammaln(alpha) - gammaln(a).sum(axis=-1) + ((a - 1.0) * np.log(y)).sum(axis=-1)
    return lp if lp.ndim else float(lp)


def dirichlet_logpdf_eta(y, eta, alpha):
    """Log-likelihood of y given log-ratio predictor eta; -inf on underflow.

    Internal sampler path: unlike :func:`dirichlet_logpdf` this never raises
    on degenerate z = alr_inverse(eta); extreme eta just yields -inf so a
    Metropolis step rejects.
    """
    z = alr_inverse(eta)
    if np.any(z <= 0):
        return -np.inf
    a = alpha * z
    lp = gammaln(alpha) - gammaln(a).sum(axis=-1) + ((a - 1.0) * np.log(y)).sum(axis=-1)
    total = float(np.sum(lp))
    return total if np.isfinite(total) else -np.inf


def dirichlet_eta_score(y, z, alpha):
    """Gradient of the Dirichlet log-density with respect to eta.

    With z = alr_inverse(eta) and g_k = alpha (log y_k - digamma(alpha z_k)):

        d logpdf / d eta_j = z_j (g_j - sum_k g_k z_k)    j < K
    """
    g = alpha * (np.log(y) - digamma(alpha * z))
    gbar = (g * z).sum(axis=-1, keepdims=True)
    return z[..., :-1] * (g[..., :-1] - gbar)


def dirichlet_eta_fisher_diag(z, alpha):
    """Diagonal of the expected information of the eta-parameterized Dirichlet.

    I_jj = alpha^2 sum_k psi'(alpha z_k) z_k^2 (delta_kj - z_j)^2; always
    nonnegative, used as a likelihood-curvature estimate by the sampler.
    """
    tri = polygamma(1, alpha * z)
    s = (tri * z**2).sum(axis=-1, keepdims=True)
    zj = z[..., :-1]
    return alpha**2 * zj**2 * (tri[..., :-1] * (1.0 - 2.0 * zj) + s)


def dirichlet_sample(z, alpha, rng, size=None):
    """Draw from Dirichlet(alpha * z) via normalized gamma variates.

    Parameters
    ----------
    z : array, shape (K,) or (m, K)
        Strictly positive mean composition(s).
    alpha : float
        Positive concentration.
    rng : numpy.random.Generator
    size : int, optional
        Number of draws per mean; prepended as the leading axis.

    Returns
    -------
    array of compositions, shape (K,), (m, K), (size, K) or (size, m, K).
    """
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError("alpha must be a positive finite scalar")
    z = _check_composition(z, "z")
    shape = z * alpha
    if size is not None:
        shape = np.broadcast_to(shape, (size,) + z.shape)
    g = rng.gamma(shape)
    g = np.maximum(g, _GAMMA_FLOOR)
    return g / g.sum(axis=-1, keepdims=True)


def _clr(x):
    lx = np.log(x)
    return lx - lx.mean(axis=-1, keepdims=True)


def aitchison_distance(x, y):
    """Aitchison distance: Euclidean distance between centered log-ratios.

    Symmetric, zero iff x == y, invariant to closure of proportional
    unnormalized inputs and to consistent permutation of categories.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError("x and y must have the same number of categories")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("aitchison_distance requires strictly positive entries")
    d = np.sqrt(((_clr(x) - _clr(y)) ** 2).sum(axis=-1))
    return d if d.ndim else float(d)


def average_compositional_distance(pred, ref, kind="rms"):
    """Aggregate Aitchison distances between aligned composition lists.

    ``kind="rms"`` (default) returns sqrt(mean(d_i^2)), the compositional
    analogue of a root mean square error; ``kind="mean"`` returns the
    arithmetic mean of the distances.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    d = aitchison_distance(pred, ref)
    if kind == "rms":
        return float(np.sqrt(np.mean(np.square(d))))
    if kind == "mean":
        return float(np.mean(d))
    raise ValueError(f"unknown aggregation kind: {kind!r}")
