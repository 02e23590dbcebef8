"""Normalized IPW, full matching, G-computation and TMLE for the ATE and ATT.

Each estimator returns counterfactual means, then the risk difference and the
marginal odds ratio built from them. Standard errors come from sandwich or
influence-curve variances pushed through the delta method; for the odds ratio
the reported ``se`` is on the log-odds-ratio scale.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from . import glm
from .matching import Estimand, FullMatch, full_match, match_weights

Z95 = 1.959963984540054
DEGENERATE_MEAN = 1e-12


class Method(str, enum.Enum):
    IPW = "IPW"
    PSM_FM = "PSM_FM"
    GCOMP = "GCOMP"
    TMLE = "TMLE"


class Scale(str, enum.Enum):
    RD = "RD"
    OR = "OR"


class Status(str, enum.Enum):
    OK = "ok"
    NON_CONVERGENT = "non_convergent"
    UNDEFINED_SCALE = "undefined_scale"


@dataclass(frozen=True)
class CausalData:
    """Binary outcome ``y``, binary treatment ``a`` and an (n, k) covariate matrix."""

    y: np.ndarray
    a: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        a = np.asarray(self.a, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        if not (y.shape == a.shape == (cov.shape[0],)):
            raise ValueError("y, a and covariates must have the same number of rows")
        for name, v in (("y", y), ("a", a)):
            if not np.all((v == 0) | (v == 1)):
                raise ValueError(f"{name} must be binary (0/1)")
        names = tuple(self.covariate_names) or tuple(f"L{j + 1}" for j in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise ValueError("covariate_names length does not match covariates")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_sample(cls, sample) -> "CausalData":
        return cls(y=sample.Y, a=sample.A, covariates=sample.covariates(), covariate_names=("L1", "L2"))

    @property
    def n(self) -> int:
        return self.y.size

    def permuted(self, perm) -> "CausalData":
        return CausalData(self.y[perm], self.a[perm], self.covariates[perm], self.covariate_names)


@dataclass(frozen=True)
class CausalEstimate:
    method: Method
    estimand: Estimand
    scale: Scale
    point: float
    se: float
    ci_low: float
    ci_high: float
    status: Status


@dataclass(frozen=True)
class CounterfactualMeans:
    ey1: float
    ey0: float


@dataclass(frozen=True)
class TmleFit:
    q0_treated: np.ndarray
    q0_control: np.ndarray
    ps_hat: np.ndarray
    epsilon0: float
    epsilon1: float
    q1_treated: np.ndarray
    q1_control: np.ndarray
    h_treated: np.ndarray
    h_control: np.ndarray
    converged: bool


@dataclass
class EstimatorResult:
    means: Optional[CounterfactualMeans]
    estimates: list = field(default_factory=list)
    fit: object = None

    def get(self, scale) -> CausalEstimate:
        scale = Scale(scale)
        return next(e for e in self.estimates if e.scale is scale)


# ---------------------------------------------------------------------------
# shared pieces


def ci_95(point: float, se: float, scale) -> tuple:
    """Wald 95% interval; for OR, ``se`` is the standard error of log(OR)."""
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    if Scale(scale) is Scale.RD:
        return point - Z95 * se, point + Z95 * se
    if not point > 0:
        raise ValueError("odds ratio must be positive")
    lp = math.log(point)
    return math.exp(lp - Z95 * se), math.exp(lp + Z95 * se)


def ps_design(data: CausalData):
    return glm.design({n: data.covariates[:, j] for j, n in enumerate(data.covariate_names)})


def outcome_design(data: CausalData, a=None):
    """Columns: intercept, A, covariates, A x covariates."""
    a = data.a if a is None else np.broadcast_to(np.asarray(a, dtype=float), data.a.shape)
    cols = {"A": a}
    for j, n in enumerate(data.covariate_names):
        cols[n] = data.covariates[:, j]
    for j, n in enumerate(data.covariate_names):
        cols[f"A:{n}"] = a * data.covariates[:, j]
    return glm.design(cols)


def fit_propensity(data: CausalData) -> glm.GlmFit:
    X, names = ps_design(data)
    return glm.fit_logistic(X, data.a, column_names=names)


def fit_outcome(data: CausalData) -> glm.GlmFit:
    X, names = outcome_design(data)
    return glm.fit_logistic(X, data.y, column_names=names)


def _degenerate(p):
    return not (DEGENERATE_MEAN < p < 1.0 - DEGENERATE_MEAN)


def _failed(method, estimand, scales, status=Status.NON_CONVERGENT):
    nan = float("nan")
    return [CausalEstimate(method, estimand, Scale(s), nan, nan, nan, nan, status) for s in scales]


def build_estimates(method, estimand, ey1, ey0, grad_var, scales=(Scale.RD, Scale.OR)):
    """RD and OR estimates from counterfactual means.

    ``grad_var(g1, g0)`` returns the variance of ``g1 * ey1 + g0 * ey0``
    (a linear functional of the two means), which is all the delta method needs.
    """
    out = []
    for s in map(Scale, scales):
        if s is Scale.RD:
            point = ey1 - ey0
            var = grad_var(1.0, -1.0)
        else:
            if _degenerate(ey1) or _degenerate(ey0):
                out.extend(_failed(method, estimand, [s], Status.UNDEFINED_SCALE))
                continue
            point = (ey1 / (1 - ey1)) / (ey0 / (1 - ey0))
            var = grad_var(1.0 / (ey1 * (1 - ey1)), -1.0 / (ey0 * (1 - ey0)))
        if not (np.isfinite(point) and np.isfinite(var)) or var < -1e-14:
            out.extend(_failed(method, estimand, [s]))
            continue
        se = math.sqrt(max(var, 0.0))
        lo, hi = ci_95(point, se, s)
        out.append(CausalEstimate(method, estimand, s, float(point), se, float(lo), float(hi), Status.OK))
    return out


def _target_mask(data, estimand):
    return np.ones(data.n, dtype=bool) if Estimand(estimand) is Estimand.ATE else data.a == 1


# ---------------------------------------------------------------------------
# IPW


def ipw_weights(ps, a, estimand):
    """Per-unit weights: ATE ``(1/PS, 1/(1-PS))``, ATT ``(1, PS/(1-PS))``."""
    ps = glm.clip_prob(ps)
    if Estimand(estimand) is Estimand.ATE:
        return np.where(a == 1, 1.0 / ps, 1.0 / (1.0 - ps))
    return np.where(a == 1, 1.0, ps / (1.0 - ps))


def hajek_means(y, a, w):
    w1 = w * a
    w0 = w * (1 - a)
    return float(np.sum(w1 * y) / np.sum(w1)), float(np.sum(w0 * y) / np.sum(w0))


def ipw_estimating_functions(theta, data, estimand, Xps):
    """Stacked per-unit estimating functions (PS scores, then the two Hajek means)."""
    p = Xps.shape[1]
    gamma, mu1, mu0 = theta[:p], theta[p], theta[p + 1]
    e = expit(Xps @ gamma)
    y, a = data.y, data.a
    w = ipw_weights(e, a, estimand)
    return np.column_stack([
        Xps * (a - e)[:, None],
        w * a * (y - mu1),
        w * (1 - a) * (y - mu0),
    ])


def _ipw_bread(theta, data, estimand, Xps):
    # analytic -E[d psi / d theta]
    n, p = Xps.shape
    gamma, mu1, mu0 = theta[:p], theta[p], theta[p + 1]
    e = glm.clip_prob(expit(Xps @ gamma))
    y, a = data.y, data.a
    J = np.zeros((p + 2, p + 2))
    J[:p, :p] = -(Xps * (e * (1 - e))[:, None]).T @ Xps
    if Estimand(estimand) is Estimand.ATE:
        d1 = a * (y - mu1) * (-(1 - e) / e)
        d0 = (1 - a) * (y - mu0) * (e / (1 - e))
        w1, w0 = 1.0 / e, 1.0 / (1 - e)
    else:
        d1 = np.zeros(n)
        odds = e / (1 - e)
        d0 = (1 - a) * (y - mu0) * odds
        w1, w0 = np.ones(n), odds
    J[p, :p] = d1 @ Xps
    J[p + 1, :p] = d0 @ Xps
    J[p, p] = -np.sum(w1 * a)
    J[p + 1, p + 1] = -np.sum(w0 * (1 - a))
    return -J / n


def estimate_ipw(data: CausalData, estimand, variance: str = "stacked", ps_fit=None,
                 scales=(Scale.RD, Scale.OR)) -> EstimatorResult:
    """Hajek-normalized inverse probability weighting.

    ``variance="stacked"`` propagates PS estimation through a joint sandwich;
    ``"fixed_weights"`` treats the weights as known.
    """
    estimand = Estimand(estimand)
    ps_fit = ps_fit or fit_propensity(data)
    if not ps_fit.converged:
        return EstimatorResult(None, _failed(Method.IPW, estimand, scales))
    Xps, _ = ps_design(data)
    e = glm.predict_prob(ps_fit, Xps)
    w = ipw_weights(e, data.a, estimand)
    ey1, ey0 = hajek_means(data.y, data.a, w)
    n = data.n
    if variance == "stacked":
        theta = np.concatenate([ps_fit.coefficients, [ey1, ey0]])
        psi = ipw_estimating_functions(theta, data, estimand, Xps)
        A = _ipw_bread(theta, data, estimand, Xps)
        B = psi.T @ psi / n
        Ainv = np.linalg.inv(A)
        V = (Ainv @ B @ Ainv.T / n)[-2:, -2:]
    elif variance == "fixed_weights":
        a, y = data.a, data.y
        v1 = np.sum((w * a * (y - ey1)) ** 2) / np.sum(w * a) ** 2
        v0 = np.sum((w * (1 - a) * (y - ey0)) ** 2) / np.sum(w * (1 - a)) ** 2
        V = np.diag([v1, v0])
    else:
        raise ValueError(f"unknown variance option {variance!r}")

    def grad_var(g1, g0):
        g = np.array([g1, g0])
        return float(g @ V @ g)

    est = build_estimates(Method.IPW, estimand, ey1, ey0, grad_var, scales)
    return EstimatorResult(CounterfactualMeans(ey1, ey0), est, fit=ps_fit)


# ---------------------------------------------------------------------------
# PSM with full matching


def estimate_psm_fm(data: CausalData, estimand, match: Optional[FullMatch] = None, ps_fit=None,
                    scales=(Scale.RD, Scale.OR)) -> EstimatorResult:
    """Weighted ``Y ~ A`` logistic fit on the full match with subclass-clustered variance."""
    estimand = Estimand(estimand)
    if match is None:
        ps_fit = ps_fit or fit_propensity(data)
        if not ps_fit.converged:
            return EstimatorResult(None, _failed(Method.PSM_FM, estimand, scales))
        Xps, _ = ps_design(data)
        match = full_match(glm.predict_prob(ps_fit, Xps), data.a)
    mw = match_weights(match, data.a, estimand)
    X, names = glm.design({"A": data.a})
    fit = glm.fit_logistic(X, data.y, weights=mw.w, column_names=names)
    if not fit.converged:
        return EstimatorResult(None, _failed(Method.PSM_FM, estimand, scales), fit=match)
    V = glm.sandwich_covariance(fit, X, data.y, weights=mw.w, clusters=match.subclass)
    b0, b1 = fit.coefficients
    # the model has no covariates, so every unit gets the same two predictions
    # and averaging over all units (ATE) or the treated (ATT) leaves them as is
    ey1, ey0 = float(expit(b0 + b1)), float(expit(b0))
    d1, d0 = ey1 * (1 - ey1), ey0 * (1 - ey0)

    def grad_var(g1, g0):
        g = np.array([g1 * d1 + g0 * d0, g1 * d1])
        return float(g @ V @ g)

    est = build_estimates(Method.PSM_FM, estimand, ey1, ey0, grad_var, scales)
    return EstimatorResult(CounterfactualMeans(ey1, ey0), est, fit=match)


# ---------------------------------------------------------------------------
# G-computation


def gcomp_functional(beta, X1, X0, mask):
    """Averaged predicted risks under treatment and control over ``mask``."""
    return float(expit(X1[mask] @ beta).mean()), float(expit(X0[mask] @ beta).mean())


def gcomp_gradients(beta, X1, X0, mask):
    p1 = expit(X1[mask] @ beta)
    p0 = expit(X0[mask] @ beta)
    g1 = (p1 * (1 - p1)) @ X1[mask] / mask.sum()
    g0 = (p0 * (1 - p0)) @ X0[mask] / mask.sum()
    return g1, g0


def estimate_gcomp(data: CausalData, estimand, outcome_fit=None, vcov: str = "model",
                   scales=(Scale.RD, Scale.OR)) -> EstimatorResult:
    """Standardize outcome-model predictions over all units (ATE) or the treated (ATT).

    The delta method uses the outcome-model coefficient covariance,
    model-based by default or ``vcov="robust"`` for the sandwich.
    """
    estimand = Estimand(estimand)
    outcome_fit = outcome_fit or fit_outcome(data)
    if not outcome_fit.converged:
        return EstimatorResult(None, _failed(Method.GCOMP, estimand, scales))
    X1, _ = outcome_design(data, 1.0)
    X0, _ = outcome_design(data, 0.0)
    mask = _target_mask(data, estimand)
    beta = outcome_fit.coefficients
    ey1, ey0 = gcomp_functional(beta, X1, X0, mask)
    g1, g0 = gcomp_gradients(beta, X1, X0, mask)
    V = outcome_fit.model_covariance if vcov == "model" else outcome_fit.robust_covariance

    def grad_var(c1, c0):
        g = c1 * g1 + c0 * g0
        return float(g @ V @ g)

    est = build_estimates(Method.GCOMP, estimand, ey1, ey0, grad_var, scales)
    return EstimatorResult(CounterfactualMeans(ey1, ey0), est, fit=outcome_fit)


# ---------------------------------------------------------------------------
# TMLE


def clever_covariates(a, ps, estimand=Estimand.ATE):
    """Return ``(H0, H1)`` evaluated at the observed treatment, plus the per-unit
    multipliers used to update the control and treated predictions."""
    ps = glm.clip_prob(ps)
    if Estimand(estimand) is Estimand.ATE:
        m1, m0 = 1.0 / ps, 1.0 / (1.0 - ps)
    else:
        m1, m0 = np.ones_like(ps), ps / (1.0 - ps)
    return (1 - a) * m0, a * m1, m0, m1


def tmle_fluctuate(data, ps, q0_1, q0_0, targeting=Estimand.ATE) -> TmleFit:
    q0_1 = glm.clip_prob(q0_1)
    q0_0 = glm.clip_prob(q0_0)
    a = data.a
    q0_a = np.where(a == 1, q0_1, q0_0)
    h0, h1, m0, m1 = clever_covariates(a, ps, targeting)
    fit = glm.fit_logistic(np.column_stack([h0, h1]), data.y, offset=logit(q0_a), intercept_free=True,
                           column_names=["H0", "H1"])
    eps0, eps1 = fit.coefficients
    q1_1 = expit(logit(q0_1) + eps1 * m1)
    q1_0 = expit(logit(q0_0) + eps0 * m0)
    return TmleFit(q0_treated=q0_1, q0_control=q0_0, ps_hat=ps, epsilon0=float(eps0), epsilon1=float(eps1),
                   q1_treated=q1_1, q1_control=q1_0, h_treated=h1, h_control=h0, converged=fit.converged)


def tmle_influence(data, tf: TmleFit, estimand, ey1, ey0):
    """Efficient influence curves of the two targeted means (ATE or ATT)."""
    y, a = data.y, data.a
    e = glm.clip_prob(tf.ps_hat)
    if Estimand(estimand) is Estimand.ATE:
        d1 = a / e * (y - tf.q1_treated) + tf.q1_treated - ey1
        d0 = (1 - a) / (1 - e) * (y - tf.q1_control) + tf.q1_control - ey0
    else:
        pt = a.mean()
        d1 = a / pt * (y - ey1)
        d0 = (1 - a) / pt * (e / (1 - e)) * (y - tf.q1_control) + a / pt * (tf.q1_control - ey0)
    return d1, d0


def estimate_tmle(data: CausalData, estimand, ps_fit=None, outcome_fit=None, targeting: Optional[str] = None,
                  scales=(Scale.RD, Scale.OR)) -> EstimatorResult:
    """Two-parameter TMLE with clever covariates ``A/PS`` and ``(1-A)/(1-PS)``.

    ``targeting`` picks the clever covariates used in the fluctuation; it
    defaults to those above for both estimands. ``targeting="ATT"`` uses
    ``A`` and ``(1-A) PS/(1-PS)`` instead. Variances are the sample variance
    of the influence curve divided by n.
    """
    estimand = Estimand(estimand)
    targeting = Estimand(targeting) if targeting is not None else Estimand.ATE
    ps_fit = ps_fit or fit_propensity(data)
    outcome_fit = outcome_fit or fit_outcome(data)
    if not (ps_fit.converged and outcome_fit.converged):
        return EstimatorResult(None, _failed(Method.TMLE, estimand, scales))
    Xps, _ = ps_design(data)
    ps = glm.predict_prob(ps_fit, Xps)
    X1, _ = outcome_design(data, 1.0)
    X0, _ = outcome_design(data, 0.0)
    tf = tmle_fluctuate(data, ps, glm.predict_prob(outcome_fit, X1), glm.predict_prob(outcome_fit, X0), targeting)
    if not tf.converged:
        return EstimatorResult(None, _failed(Method.TMLE, estimand, scales), fit=tf)
    mask = _target_mask(data, estimand)
    ey1 = float(tf.q1_treated[mask].mean())
    ey0 = float(tf.q1_control[mask].mean())
    d1, d0 = tmle_influence(data, tf, estimand, ey1, ey0)
    n = data.n

    def grad_var(g1, g0):
        return float(np.var(g1 * d1 + g0 * d0, ddof=1) / n)

    est = build_estimates(Method.TMLE, estimand, ey1, ey0, grad_var, scales)
    return EstimatorResult(CounterfactualMeans(ey1, ey0), est, fit=tf)


# ---------------------------------------------------------------------------


def estimate_all(data: CausalData, methods: Sequence = tuple(Method), estimands: Sequence = tuple(Estimand),
                 scales: Sequence = tuple(Scale), max_optimal_size: Optional[int] = None) -> list:
    """Run the requested estimators, sharing the propensity, outcome and match fits."""
    methods = [Method(m) for m in methods]
    estimands = [Estimand(e) for e in estimands]
    scales = tuple(Scale(s) for s in scales)
    out = []
    ps_fit = fit_propensity(data) if {Method.IPW, Method.PSM_FM, Method.TMLE} & set(methods) else None
    outcome_fit = fit_outcome(data) if {Method.GCOMP, Method.TMLE} & set(methods) else None
    match = None
    for m in methods:
        if m is Method.PSM_FM and ps_fit.converged:
            Xps, _ = ps_design(data)
            match = full_match(glm.predict_prob(ps_fit, Xps), data.a, max_optimal_size=max_optimal_size)
        for est in estimands:
            if m is Method.IPW:
                r = estimate_ipw(data, est, ps_fit=ps_fit, scales=scales)
            elif m is Method.PSM_FM:
                r = (estimate_psm_fm(data, est, match=match, scales=scales) if match is not None
                     else EstimatorResult(None, _failed(m, est, scales)))
            elif m is Method.GCOMP:
                r = estimate_gcomp(data, est, outcome_fit=outcome_fit, scales=scales)
            else:
                r = estimate_tmle(data, est, ps_fit=ps_fit, outcome_fit=outcome_fit, scales=scales)
            out.extend(r.estimates)
    return out
