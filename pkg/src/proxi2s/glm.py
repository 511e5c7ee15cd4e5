"""Canonical-link GLM and baseline-category logit fitting.

Identity, log (Poisson) and logit (Bernoulli) links are fitted by
iteratively reweighted least squares, each weighted least-squares step solved
through a QR factorisation.  The multinomial model uses Newton's method with
the full Hessian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, logsumexp, xlogy

from .errors import ConvergenceError, DataError, RankDeficientError, SeparationError

LINKS = ("identity", "log", "logit")

PROB_CLAMP = 1e-12
SEPARATION_ETA = 30.0
RANK_TOL = 1e-9
MAX_ITER = 100
MAX_HALVINGS = 20
DEV_TOL = 1e-8
SCORE_TOL = 1e-8
_EXP_MAX = 700.0


def inverse_link(link: str, eta):
    """Mean value for linear predictor ``eta``.

    The logit inverse is clamped to ``[1e-12, 1 - 1e-12]``.
    """
    eta = np.asarray(eta, dtype=float)
    if link == "identity":
        return eta.copy()
    if link == "log":
        return np.exp(np.minimum(eta, _EXP_MAX))
    if link == "logit":
        return np.clip(expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
    raise DataError(f"unknown link {link!r}")


def link_function(link: str, mu):
    mu = np.asarray(mu, dtype=float)
    if link == "identity":
        return mu.copy()
    if link == "log":
        return np.log(mu)
    if link == "logit":
        return np.log(mu) - np.log1p(-mu)
    raise DataError(f"unknown link {link!r}")


def variance_function(link: str, mu):
    """Var(Y)/phi for the canonical family of ``link``."""
    if link == "identity":
        return np.ones_like(mu)
    if link == "log":
        return mu
    return mu * (1.0 - mu)


def unit_deviance(link, y, mu):
    if link == "identity":
        return (y - mu) ** 2
    if link == "log":
        return 2.0 * (xlogy(y, y) - xlogy(y, mu) - (y - mu))
    return -2.0 * (xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu))


@dataclass(frozen=True, eq=False)
class GlmFit:
    link: str
    coef: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    offset: np.ndarray | None = None
    score_norm: float = 0.0

    @property
    def n(self) -> int:
        return self.eta.shape[0]


@dataclass(frozen=True, eq=False)
class MultinomialFit:
    """Baseline-category logit fit; row ``k-1`` of ``coef`` is level ``k``."""

    levels: int
    coef: np.ndarray
    eta: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    score_norm: float = 0.0

    @property
    def probabilities(self) -> np.ndarray:
        return multinomial_probabilities(self.eta)


def multinomial_probabilities(eta) -> np.ndarray:
    """Category probabilities (n x (K+1)) from non-reference predictors (n x K)."""
    eta = np.atleast_2d(eta)
    full = np.column_stack([np.zeros(eta.shape[0]), eta])
    return np.exp(full - logsumexp(full, axis=1, keepdims=True))


def check_rank(design, names=None, weights=None):
    """Raise :class:`RankDeficientError` unless ``design`` has full column rank."""
    X = np.asarray(design, dtype=float)
    if weights is not None:
        X = X * np.sqrt(weights)[:, None]
    n, p = X.shape
    if p == 0:
        return
    if n < p:
        raise RankDeficientError(f"design has {p} columns but only {n} rows", range(p))
    norms = np.linalg.norm(X, axis=0)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        cols = [names[j] if names else j for j in zero]
        raise RankDeficientError(f"design columns {cols} are identically zero", cols)
    _, R, piv = scipy.linalg.qr(X / norms, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1.0)))
    if rank < p:
        bad = sorted(piv[rank:])
        cols = [names[j] if names else int(j) for j in bad]
        raise RankDeficientError(
            f"design is rank deficient (rank {rank} < {p}); collinear columns: {cols}", cols
        )


def _wls(X, z, w):
    sw = np.sqrt(w)
    Q, R = np.linalg.qr(X * sw[:, None])
    return scipy.linalg.solve_triangular(R, Q.T @ (sw * z))


def _validate_response(link, y):
    if not np.all(np.isfinite(y)):
        raise DataError("response has non-finite values")
    if link == "log" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise DataError("log link requires a nonnegative integer response")
    if link == "logit" and not np.all((y == 0) | (y == 1)):
        raise DataError("logit link requires a 0/1 response")


def fit_glm(design, response, link, offset=None, weights=None, *, names=None,
            max_iter=MAX_ITER) -> GlmFit:
    """Maximum-likelihood fit of a canonical-link GLM.

    ``offset`` enters the linear predictor with coefficient fixed at one;
    ``weights`` are prior (frequency) weights.
    """
    if link not in LINKS:
        raise DataError(f"unknown link {link!r}")
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).ravel()
    n, p = X.shape
    if y.shape[0] != n:
        raise DataError(f"response length {y.shape[0]} does not match design rows {n}")
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).ravel()
    wt = np.ones(n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if off.shape[0] != n or wt.shape[0] != n:
        raise DataError("offset and weights must match the number of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(off))):
        raise DataError("design or offset has non-finite values")
    if np.any(wt < 0):
        raise DataError("weights must be nonnegative")
    _validate_response(link, y)
    check_rank(X, names, wt)

    def finish(beta, eta, converged, it):
        mu = inverse_link(link, eta)
        dev = float(np.sum(wt * unit_deviance(link, y, mu)))
        score = float(np.max(np.abs(X.T @ (wt * (y - mu))))) / n if p else 0.0
        return GlmFit(link, beta, eta, mu, dev, converged, it,
                      None if offset is None else off, score)

    if link == "identity":
        beta = _wls(X, y - off, wt)
        return finish(beta, X @ beta + off, True, 1)

    beta = np.zeros(p)
    eta = off.copy()
    mu = inverse_link(link, eta)
    dev = float(np.sum(wt * unit_deviance(link, y, mu)))
    for it in range(1, max_iter + 1):
        v = variance_function(link, mu)
        z = eta - off + (y - mu) / v
        beta_new = _wls(X, z, wt * v)
        eta_new = X @ beta_new + off
        mu_new = inverse_link(link, eta_new)
        dev_new = float(np.sum(wt * unit_deviance(link, y, mu_new)))
        halvings = 0
        while not np.isfinite(dev_new) or dev_new > dev * (1 + 1e-12) + 1e-12:
            if halvings == MAX_HALVINGS:
                raise ConvergenceError(f"step-halving failed to reduce the deviance at iteration {it}")
            halvings += 1
            beta_new = 0.5 * (beta + beta_new)
            eta_new = X @ beta_new + off
            mu_new = inverse_link(link, eta_new)
            dev_new = float(np.sum(wt * unit_deviance(link, y, mu_new)))
        rel_change = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        if link == "logit" and np.max(np.abs(eta)) > SEPARATION_ETA:
            raise SeparationError(
                f"separation detected: |eta| reached {np.max(np.abs(eta)):.1f} at iteration {it}"
            )
        score = float(np.max(np.abs(X.T @ (wt * (y - mu))))) / n
        if rel_change <= DEV_TOL and score <= SCORE_TOL:
            return finish(beta, eta, True, it)
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations")


def fit_multinomial(design, response, levels=None, *, max_iter=MAX_ITER) -> MultinomialFit:
    """Baseline-category logit model with reference level 0."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float).ravel()
    n, p = X.shape
    if y.shape[0] != n:
        raise DataError(f"response length {y.shape[0]} does not match design rows {n}")
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise DataError("multinomial response must hold integer category codes")
    levels = int(y.max()) + 1 if levels is None else int(levels)
    counts = np.bincount(y.astype(int), minlength=levels)
    if counts.shape[0] > levels:
        raise DataError(f"response has codes above {levels - 1}")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(f"response levels {missing.tolist()} are not observed")
    check_rank(X)
    K = levels - 1
    Y = (y[:, None] == np.arange(1, levels)[None, :]).astype(float)

    def loglik(B):
        eta = X @ B.T
        full = np.column_stack([np.zeros(n), eta])
        return float(np.sum(Y * eta) - np.sum(logsumexp(full, axis=1))), eta

    B = np.zeros((K, p))
    ll, eta = loglik(B)
    for it in range(1, max_iter + 1):
        P = multinomial_probabilities(eta)[:, 1:]
        grad = ((Y - P).T @ X).ravel()
        H = np.empty((K * p, K * p))
        for j in range(K):
            for k in range(K):
                c = P[:, j] * ((j == k) - P[:, k])
                H[j * p:(j + 1) * p, k * p:(k + 1) * p] = X.T @ (X * c[:, None])
        step = scipy.linalg.solve(H, grad, assume_a="pos").reshape(K, p)
        B_new = B + step
        ll_new, eta_new = loglik(B_new)
        halvings = 0
        while not np.isfinite(ll_new) or ll_new < ll - 1e-12 * (1 + abs(ll)):
            if halvings == MAX_HALVINGS:
                raise ConvergenceError(f"step-halving failed to increase the likelihood at iteration {it}")
            halvings += 1
            B_new = 0.5 * (B + B_new)
            ll_new, eta_new = loglik(B_new)
        rel_change = abs(ll_new - ll) / (abs(ll_new) + 0.1)
        B, ll, eta = B_new, ll_new, eta_new
        if np.max(np.abs(eta)) > SEPARATION_ETA:
            raise SeparationError(
                f"separation detected: |eta| reached {np.max(np.abs(eta)):.1f} at iteration {it}"
            )
        P = multinomial_probabilities(eta)[:, 1:]
        score = float(np.max(np.abs((Y - P).T @ X))) / n
        if rel_change <= DEV_TOL and score <= SCORE_TOL:
            return MultinomialFit(levels, B, eta, True, it, ll, score)
    raise ConvergenceError(f"Newton iterations did not converge in {max_iter} iterations")


def predict_eta(fit, design, offset=None):
    """Linear predictor ``design @ coef`` (plus ``offset``).

    For a :class:`MultinomialFit` the result has one column per non-reference
    level.  Build ``design`` with :func:`proxi2s.data.build_design` and its
    ``overrides`` argument to evaluate at fixed column values.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    coef = np.asarray(fit.coef)
    width = coef.shape[-1]
    if X.shape[1] != width:
        raise DataError(f"design has {X.shape[1]} columns, fit expects {width}")
    eta = X @ coef.T if coef.ndim == 2 else X @ coef
    if offset is not None:
        off = np.asarray(offset, dtype=float)
        eta = eta + (off[:, None] if eta.ndim == 2 else off)
    return eta


def glm_covariance(fit: GlmFit, design, weights=None) -> np.ndarray:
    """Model-based covariance (inverse Fisher information times dispersion)."""
    X = np.asarray(design, dtype=float)
    wt = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    v = wt * variance_function(fit.link, fit.mu)
    info = X.T @ (X * v[:, None])
    cov = np.linalg.inv(info)
    if fit.link == "identity":
        dof = max(X.shape[0] - X.shape[1], 1)
        cov = cov * fit.deviance / dof
    return cov
