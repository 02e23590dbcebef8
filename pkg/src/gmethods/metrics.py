"""Simulation performance measures with Monte Carlo standard errors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy import stats

SUPPRESS_REL_BIAS_BELOW = 1e-10


@dataclass(frozen=True)
class PerformanceSummary:
    scenario_label: str
    method: str
    estimand: str
    scale: str
    truth: float
    n_total: int
    n_used: int
    n_failed: int
    n_excluded: int
    bias: float
    bias_mcse: float
    rel_bias: Optional[float]
    rel_bias_mcse: Optional[float]
    emp_se: float
    emp_se_mcse: float
    mse: float
    mse_mcse: float
    coverage: float
    coverage_mcse: float
    mean_model_se: float
    failure_rate: float
    failure_cp_low: float
    failure_cp_high: float
    exclusion_rate: float
    exclusion_cp_low: float
    exclusion_cp_high: float

    def to_dict(self) -> dict:
        return asdict(self)


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple:
    """Exact binomial interval from beta quantiles."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n and n >= 1")
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def plan_nsim(pilot_emp_se: float, target_bias_mcse: float) -> int:
    """Repetitions needed so that ``emp_se / sqrt(nsim)`` is at most the target."""
    if pilot_emp_se <= 0 or target_bias_mcse <= 0:
        raise ValueError("inputs must be positive")
    ratio = (pilot_emp_se / target_bias_mcse) ** 2
    # guard against 1067.0000000000002 rounding up
    return max(1, math.ceil(ratio - 1e-9))


def performance(estimates, truth: float, ci_low=None, ci_high=None, se=None) -> dict:
    """Bias, EmpSE, MSE and coverage of ``estimates`` around ``truth`` with MCSEs."""
    th = np.asarray(estimates, dtype=float)
    n = th.size
    if n < 2:
        raise ValueError("need at least 2 usable estimates")
    bias = th.mean() - truth
    emp_se = th.std(ddof=1)
    sq = (th - truth) ** 2
    mse = sq.mean()
    out = {
        "bias": float(bias),
        "bias_mcse": float(emp_se / math.sqrt(n)),
        "emp_se": float(emp_se),
        "emp_se_mcse": float(emp_se / math.sqrt(2 * (n - 1))),
        "mse": float(mse),
        "mse_mcse": float(math.sqrt(np.sum((sq - mse) ** 2) / (n * (n - 1)))),
    }
    if abs(truth) > SUPPRESS_REL_BIAS_BELOW:
        out["rel_bias"] = float(bias / truth)
        out["rel_bias_mcse"] = float(out["bias_mcse"] / abs(truth))
    else:
        out["rel_bias"] = None
        out["rel_bias_mcse"] = None
    if ci_low is not None:
        cover = (np.asarray(ci_low) <= truth) & (truth <= np.asarray(ci_high))
        c = float(cover.mean())
        out["coverage"] = c
        out["coverage_mcse"] = math.sqrt(c * (1 - c) / n)
    if se is not None:
        out["mean_model_se"] = float(np.mean(se))
    return out


def _truth_lookup(truths, label, estimand, scale):
    if isinstance(truths, pd.DataFrame):
        row = truths.loc[truths["scenario_label"] == label]
        if row.empty:
            raise KeyError(f"no truth for scenario {label!r}")
        return float(row.iloc[0][f"{estimand.lower()}_{scale.lower()}"])
    key = (label, estimand, scale)
    if key in truths:
        return float(truths[key])
    t = truths[label]
    return float(t.value(estimand, scale)) if hasattr(t, "value") else float(t[f"{estimand.lower()}_{scale.lower()}"])


def summarize(records: pd.DataFrame, truths) -> list:
    """One :class:`PerformanceSummary` per scenario x method x estimand x scale.

    ``records`` has the raw-results CSV columns. Rows with status ``excluded``
    are zero-event iterations; other non-``ok`` rows count as failures. On the
    OR scale bias, EmpSE and MSE are computed for log(OR) against log(truth),
    while coverage checks the OR intervals against the OR truth.
    """
    df = records.copy()
    keys = ["scenario_label", "method", "estimand", "scale"]
    out = []
    for (label, method, estimand, scale), g in df.groupby(keys, sort=True):
        truth = _truth_lookup(truths, label, estimand, scale)
        ok = g[g["status"] == "ok"]
        n_total = len(g)
        n_excl = int((g["status"] == "excluded").sum())
        n_fail = n_total - n_excl - len(ok)
        attempted = n_total - n_excl
        point = ok["point"].to_numpy(float)
        if scale == "OR":
            th, tt = np.log(point), math.log(truth)
        else:
            th, tt = point, truth
        nan = float("nan")
        if len(ok) >= 2:
            perf = performance(th, tt, se=ok["se"].to_numpy(float))
            cover = (ok["ci_low"].to_numpy(float) <= truth) & (truth <= ok["ci_high"].to_numpy(float))
            c = float(cover.mean())
            perf["coverage"], perf["coverage_mcse"] = c, math.sqrt(c * (1 - c) / len(ok))
        else:
            perf = dict(bias=nan, bias_mcse=nan, emp_se=nan, emp_se_mcse=nan, mse=nan, mse_mcse=nan,
                        rel_bias=None, rel_bias_mcse=None, coverage=nan, coverage_mcse=nan, mean_model_se=nan)
        f_lo, f_hi = clopper_pearson(n_fail, attempted) if attempted else (nan, nan)
        e_lo, e_hi = clopper_pearson(n_excl, n_total)
        out.append(PerformanceSummary(
            scenario_label=label, method=method, estimand=estimand, scale=scale, truth=truth,
            n_total=n_total, n_used=len(ok), n_failed=n_fail, n_excluded=n_excl,
            bias=perf["bias"], bias_mcse=perf["bias_mcse"], rel_bias=perf["rel_bias"],
            rel_bias_mcse=perf["rel_bias_mcse"], emp_se=perf["emp_se"], emp_se_mcse=perf["emp_se_mcse"],
            mse=perf["mse"], mse_mcse=perf["mse_mcse"], coverage=perf["coverage"],
            coverage_mcse=perf["coverage_mcse"], mean_model_se=perf["mean_model_se"],
            failure_rate=n_fail / attempted if attempted else nan, failure_cp_low=f_lo, failure_cp_high=f_hi,
            exclusion_rate=n_excl / n_total, exclusion_cp_low=e_lo, exclusion_cp_high=e_hi,
        ))
    return out


def zipper_data(records: pd.DataFrame, truths) -> pd.DataFrame:
    """Per-iteration intervals ranked by ``|estimate - truth| / se`` for zipper plots."""
    rows = []
    ok = records[records["status"] == "ok"]
    for (label, method, estimand, scale), g in ok.groupby(["scenario_label", "method", "estimand", "scale"], sort=True):
        truth = _truth_lookup(truths, label, estimand, scale)
        est = g["point"].to_numpy(float)
        se = g["se"].to_numpy(float)
        centre = np.log(est) - math.log(truth) if scale == "OR" else est - truth
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(centre) / se
        rank = stats.rankdata(z, method="ordinal") / len(z) * 100.0
        lo = g["ci_low"].to_numpy(float)
        hi = g["ci_high"].to_numpy(float)
        for it, zi, ri, l, h in zip(g["iteration"], z, rank, lo, hi):
            rows.append((label, method, estimand, scale, int(it), float(zi), float(ri), l, h, bool(l <= truth <= h)))
    return pd.DataFrame(rows, columns=["scenario_label", "method", "estimand", "scale", "iteration", "abs_z",
                                       "z_centile", "ci_low", "ci_high", "covers"])


def summaries_frame(summaries: Iterable[PerformanceSummary]) -> pd.DataFrame:
    return pd.DataFrame([s.to_dict() for s in summaries])
