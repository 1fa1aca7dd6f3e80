"""Sparse SPD factorization and small-matrix sampling utilities."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import splu

from .errors import NumericError

__all__ = ["SparseCholesky", "sample_inverse_wishart", "inverse_wishart_logpdf"]


class SparseCholesky:
    """Cholesky-type factorization of a sparse SPD matrix via SuperLU.

    SuperLU in symmetric mode with diagonal pivoting gives P A P^T = L D L^T
    for SPD input. Exposes the log-determinant, linear solves, and exact
    draws from N(0, A^{-1}); the factor object is immutable and shareable.
    """

    def __init__(self, a):
        a = sp.csc_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        try:
            lu = splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise NumericError(f"sparse factorization failed: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NumericError("matrix is not symmetric positive definite (pivoting occurred)")
        d = lu.U.diagonal()
        if not np.all(d > 0):
            raise NumericError("matrix is not positive definite")
        self._lu = lu
        self._perm = lu.perm_r
        self._d = d
        self._half_factor = None
        self.logdet = float(np.log(d).sum())
        self.n = a.shape[0]
        self.matrix = a

    @property
    def _half(self):
        # lower Cholesky of the permuted matrix: A[ip][:, ip] = half @ half.T;
        # built lazily since logdet-only uses (kappa proposals) never need it
        if self._half_factor is None:
            self._half_factor = (self._lu.L @ sp.diags(np.sqrt(self._d))).tocsr()
        return self._half_factor

    def solve(self, b):
        """Solve A x = b; b may be a vector or a (n, m) matrix."""
        return self._lu.solve(np.asarray(b, dtype=float))

    def sample(self, rng, size=None):
        """Draw from N(0, A^{-1}).

        Uses the identity x = A^{-1} P^T half z, which has covariance
        A^{-1} (half half^T = P A P^T), avoiding triangular back-solves.
        Returns shape (n,) or (n, size).
        """
        z = rng.standard_normal((self.n,) if size is None else (self.n, size))
        w = self._half @ z
        return self._lu.solve(w[self._perm])


def sample_inverse_wishart(df, scale, rng):
    """Draw an SPD matrix from InverseWishart(df, scale) (Bartlett construction).

    Density proportional to |S|^{-(df+p+1)/2} exp(-tr(scale S^{-1})/2);
    mean scale / (df - p - 1) for df > p + 1.
    """
    scale = np.asarray(scale, dtype=float)
    p = scale.shape[0]
    if df <= p - 1:
        raise ValueError(f"df must exceed p - 1 = {p - 1}")
    try:
        chol_inv_scale = np.linalg.cholesky(np.linalg.inv(scale))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"inverse-Wishart scale not positive definite: {exc}") from exc
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    if p > 1:
        a[np.tril_indices(p, -1)] = rng.standard_normal(p * (p - 1) // 2)
    f = chol_inv_scale @ a  # W = f f^T ~ Wishart(df, scale^{-1})
    finv = solve_triangular(f, np.eye(p), lower=True)
    s = finv.T @ finv
    return 0.5 * (s + s.T)


def inverse_wishart_logpdf(x, df, scale):
    """Log-density of InverseWishart(df, scale) at SPD matrix x."""
    from scipy.special import multigammaln

    x = np.asarray(x, dtype=float)
    scale = np.asarray(scale, dtype=float)
    p = x.shape[0]
    sign_x, logdet_x = np.linalg.slogdet(x)
    sign_s, logdet_s = np.linalg.slogdet(scale)
    if sign_x <= 0 or sign_s <= 0:
        raise ValueError("x and scale must be positive definite")
    tr = np.trace(np.linalg.solve(x, scale))
    return float(
        0.5 * df * logdet_s
        - 0.5 * df * p * np.log(2.0)
        - multigammaln(0.5 * df, p)
        - 0.5 * (df + p + 1.0) * logdet_x
        - 0.5 * tr
    )
