"""Maximum-likelihood logistic regression with model-based and sandwich covariance.

Every propensity and outcome model in the package is fit through
:func:`fit_logistic`, including the weighted, offset and intercept-free fits
used by the TMLE fluctuation step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit

MAX_ITER = 100
REL_LOGLIK_TOL = 1e-10
SCORE_TOL = 1e-8
SEPARATION_BOUND = 20.0
PROB_CLIP = 1e-12
# fitted probabilities this close to 0 or 1 trigger the exact separation check
SATURATION = 1e-7


class RankDeficientError(ValueError):
    """Raised when the design matrix has linearly dependent columns."""

    def __init__(self, column: str, index: int):
        self.column = column
        self.index = index
        super().__init__(f"design matrix is rank deficient: column {column!r} (index {index}) is collinear")


class SingularBreadError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GlmFit:
    coefficients: np.ndarray
    model_covariance: np.ndarray
    robust_covariance: np.ndarray
    converged: bool
    iterations: int
    offset_used: bool
    loglik: float
    column_names: tuple = ()
    loglik_path: tuple = field(default=(), repr=False)

    @property
    def n_params(self) -> int:
        return len(self.coefficients)


def clip_prob(p):
    """Clip probabilities away from 0 and 1; only used right before a division."""
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def _loglik(eta, y, w):
    # y*log(p) + (1-y)*log(1-p), stable for large |eta|
    return float(np.sum(w * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta))))


def _check_inputs(X, y, weights, offset):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D array")
    n, p = X.shape
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary (0/1)")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n,):
        raise ValueError("weights length does not match rows of X")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(weights > 0):
        raise ValueError("weights are all zero")
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if offset.shape != (n,):
            raise ValueError("offset length does not match rows of X")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite entries")
    return X, y, weights, offset


def _check_rank(X, weights, names):
    Xw = X[weights > 0]
    if Xw.shape[0] < X.shape[1]:
        raise RankDeficientError(names[X.shape[1] - 1], X.shape[1] - 1)
    # scale columns so the rank tolerance is unit-free
    scale = np.sqrt(np.sum(Xw ** 2, axis=0))
    scale[scale == 0] = 1.0
    Xs = Xw / scale
    # sequential check gives the first column that adds nothing new
    q, r, piv = linalg.qr(Xs, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(Xs.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0) * 1e3
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        for j in range(X.shape[1]):
            if np.linalg.matrix_rank(Xs[:, : j + 1], tol=tol) < j + 1:
                raise RankDeficientError(names[j], j)
        bad = int(piv[rank])
        raise RankDeficientError(names[bad], bad)


def fit_logistic(
    X,
    y,
    weights=None,
    offset=None,
    intercept_free: bool = False,
    column_names: Optional[Sequence[str]] = None,
) -> GlmFit:
    """Fit a logistic regression by Newton-Raphson (IRLS) with step halving.

    Parameters
    ----------
    X : (n, p) array
        Design matrix. Its first column must be all ones unless
        ``intercept_free`` is set.
    y : (n,) binary array
    weights : (n,) nonnegative array, optional
        Case weights; the fit is invariant to rescaling them.
    offset : (n,) array, optional
        Fixed term added to the linear predictor.
    intercept_free : bool
        Skip the intercept-column check.

    Returns
    -------
    GlmFit
        ``converged`` is False when the iteration cap is hit or any
        standardized coefficient exceeds ``SEPARATION_BOUND`` in magnitude.
    """
    X, y, w, offset = _check_inputs(X, y, weights, offset)
    n, p = X.shape
    names = tuple(column_names) if column_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ValueError("column_names length does not match columns of X")
    if not intercept_free and not np.all(X[:, 0] == 1.0):
        raise ValueError("first column must be the intercept (all ones)")
    _check_rank(X, w, names)

    off = np.zeros(n) if offset is None else offset
    beta = np.zeros(p)
    if not intercept_free:
        ybar = np.sum(w * y) / np.sum(w)
        if 0.0 < ybar < 1.0:
            beta[0] = np.log(ybar / (1.0 - ybar))
    eta = off + X @ beta
    ll = _loglik(eta, y, w)
    path = [ll]
    converged = False
    separated = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            it -= 1
            break
        v = w * mu * (1.0 - mu)
        info = X.T @ (v[:, None] * X)
        try:
            cf = linalg.cho_factor(info, check_finite=False)
            step = linalg.cho_solve(cf, score, check_finite=False)
        except linalg.LinAlgError:
            step = linalg.lstsq(info, score, check_finite=False)[0]
        # step halving keeps the log-likelihood non-decreasing
        t = 1.0
        for _ in range(40):
            new_beta = beta + t * step
            new_eta = off + X @ new_beta
            new_ll = _loglik(new_eta, y, w)
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        rel = abs(new_ll - ll) / (abs(ll) + 1e-300)
        beta, eta, ll = new_beta, new_eta, max(new_ll, ll)
        path.append(ll)
        if _standardized_max(beta, X, w, intercept_free) > SEPARATION_BOUND:
            separated = True
            break
        if rel < REL_LOGLIK_TOL:
            mu = expit(eta)
            score = X.T @ (w * (y - mu))
            converged = bool(np.max(np.abs(score)) < SCORE_TOL * max(1.0, np.sum(w)))
            # an essentially flat likelihood with a non-negligible score means
            # coefficients are drifting off to infinity
            if not converged:
                continue
            break

    mu = expit(eta)
    v = w * mu * (1.0 - mu)
    info = X.T @ (v[:, None] * X)
    try:
        model_cov = linalg.inv(info)
    except linalg.LinAlgError:
        model_cov = np.full((p, p), np.nan)
    model_cov = 0.5 * (model_cov + model_cov.T)
    if separated or _standardized_max(beta, X, w, intercept_free) > SEPARATION_BOUND:
        converged = False
    elif offset is None and np.min(np.minimum(mu, 1.0 - mu)[w > 0], initial=1.0) < SATURATION:
        if has_separation(X, y, w):
            converged = False
    robust_cov = _sandwich(X, y, w, eta, None)
    return GlmFit(
        coefficients=beta,
        model_covariance=model_cov,
        robust_covariance=robust_cov,
        converged=converged,
        iterations=it,
        offset_used=offset is not None,
        loglik=ll,
        column_names=names,
        loglik_path=tuple(path),
    )


def has_separation(X, y, weights=None) -> bool:
    """Exact test for (quasi-)complete separation by linear programming.

    Looks for a direction ``d`` with ``(2y - 1) * x_i @ d >= 0`` for every
    row and strict inequality for at least one; the MLE is infinite exactly
    when such a direction exists.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.ones(y.size, bool) if weights is None else np.asarray(weights) > 0
    X, y = X[keep], y[keep]
    scale = np.sqrt(np.mean(X**2, axis=0))
    scale[scale == 0] = 1.0
    Z = (2.0 * y - 1.0)[:, None] * (X / scale)
    res = optimize.linprog(-Z.sum(axis=0), A_ub=-Z, b_ub=np.zeros(y.size), bounds=[(-1.0, 1.0)] * X.shape[1],
                           method="highs")
    if res.status != 0:
        return False
    return bool(-res.fun > 1e-7 * max(1.0, y.size))


def _standardized_max(beta, X, w, intercept_free):
    """Largest |coefficient| after reparametrizing to standardized columns.

    Non-intercept columns are centered (unless the model has no intercept) and
    scaled to unit weighted SD, and the intercept becomes the linear predictor
    at the covariate means. This keeps the separation cap from firing on
    large but finite coefficients that only reflect column location or units.
    """
    wn = w / np.sum(w)
    if intercept_free:
        scale = np.sqrt(wn @ X**2)
        return float(np.max(np.abs(beta * scale)))
    mean = wn @ X[:, 1:]
    sd = np.sqrt(wn @ (X[:, 1:] - mean) ** 2)
    slopes = beta[1:] * sd
    centred = beta[0] + mean @ beta[1:]
    return float(max(abs(centred), np.max(np.abs(slopes), initial=0.0)))


def predict_prob(fit: GlmFit, X, offset=None) -> np.ndarray:
    """Return ``expit(X @ beta + offset)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != fit.n_params:
        raise ValueError(f"X has {X.shape[1]} columns, fit has {fit.n_params}")
    eta = X @ fit.coefficients
    if offset is not None:
        offset = np.asarray(offset, dtype=float)
        if offset.shape != eta.shape:
            raise ValueError("offset length does not match rows of X")
        eta = eta + offset
    return expit(eta)


def _sandwich(X, y, w, eta, clusters):
    mu = expit(eta)
    bread = X.T @ ((w * mu * (1.0 - mu))[:, None] * X)
    scores = (w * (y - mu))[:, None] * X
    if clusters is not None:
        _, inv = np.unique(clusters, return_inverse=True)
        summed = np.zeros((inv.max() + 1, X.shape[1]))
        np.add.at(summed, inv, scores)
        scores = summed
    meat = scores.T @ scores
    try:
        binv = linalg.inv(bread)
    except linalg.LinAlgError:
        return np.full_like(bread, np.nan)
    cov = binv @ meat @ binv
    return 0.5 * (cov + cov.T)


def sandwich_covariance(fit: GlmFit, X, y, weights=None, clusters=None, offset=None) -> np.ndarray:
    """Robust covariance ``B^-1 M B^-1``, optionally clustered.

    With ``clusters`` the meat sums score contributions within each cluster
    before taking outer products; singleton clusters reproduce the
    heteroskedasticity-robust form. No small-sample correction is applied.
    """
    X, y, w, offset = _check_inputs(X, y, weights, offset)
    if clusters is not None:
        clusters = np.asarray(clusters)
        if clusters.shape != (X.shape[0],):
            raise ValueError("every observation needs exactly one cluster label")
    eta = X @ fit.coefficients
    if offset is not None:
        eta = eta + offset
    mu = expit(eta)
    bread = X.T @ ((w * mu * (1.0 - mu))[:, None] * X)
    if np.linalg.cond(bread) > 1e14:
        raise SingularBreadError("bread matrix is singular")
    return _sandwich(X, y, w, eta, clusters)


def design(columns: dict, intercept: bool = True):
    """Stack named 1-D arrays into a design matrix; returns ``(X, names)``."""
    names = list(columns)
    cols = [np.asarray(columns[k], dtype=float) for k in names]
    if intercept:
        n = len(cols[0]) if cols else 0
        cols = [np.ones(n)] + cols
        names = ["(Intercept)"] + names
    return np.column_stack(cols), names
