import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gmethods.metrics import clopper_pearson, performance, plan_nsim, summarize, zipper_data

FIRST_STAGE_NSIM = 1067


def test_trivial_perfect_estimates():
    p = performance([0.3] * 5, 0.3, ci_low=[0.2] * 5, ci_high=[0.4] * 5)
    assert p["bias"] == 0 and p["mse"] == 0 and p["coverage"] == 1


def test_hand_arithmetic():
    p = performance([2.0, 0.0], 1.0)
    assert p["bias"] == 0
    assert p["mse"] == 1
    assert p["emp_se"] == pytest.approx(math.sqrt(2))
    assert p["bias_mcse"] == pytest.approx(1.0)
    assert p["emp_se_mcse"] == pytest.approx(1.0)


def test_mse_mcse_formula():
    th = np.array([0.1, 0.4, -0.2, 0.3, 0.0])
    sq = (th - 0.05) ** 2
    expected = math.sqrt(np.sum((sq - sq.mean()) ** 2) / (5 * 4))
    assert performance(th, 0.05)["mse_mcse"] == pytest.approx(expected, rel=1e-12)


def test_needs_two_estimates():
    with pytest.raises(ValueError):
        performance([1.0], 1.0)


def test_normal_sampling_coverage_oracle():
    rng = np.random.default_rng(0)
    n, theta, sigma = 10_000, 0.7, 0.2
    th = rng.normal(theta, sigma, n)
    z = stats.norm.ppf(0.975)
    p = performance(th, theta, ci_low=th - z * sigma, ci_high=th + z * sigma, se=np.full(n, sigma))
    assert abs(p["coverage"] - 0.95) < 3 * p["coverage_mcse"]
    assert abs(p["bias"]) < 3 * p["bias_mcse"]
    assert p["mean_model_se"] == pytest.approx(sigma)


def test_rel_bias_suppressed_for_null_truth_and_signed_otherwise():
    assert performance([0.1, -0.05], 0.0)["rel_bias"] is None
    p = performance([0.6, 0.8], 0.5)
    assert p["rel_bias"] > 0 and p["bias"] > 0
    assert p["rel_bias"] == pytest.approx(0.2 / 0.5)


def test_duplicating_records():
    rng = np.random.default_rng(1)
    th = rng.normal(size=200)
    a = performance(th, 0.0, ci_low=th - 1, ci_high=th + 1)
    b = performance(np.concatenate([th, th]), 0.0, ci_low=np.concatenate([th, th]) - 1,
                    ci_high=np.concatenate([th, th]) + 1)
    assert b["bias"] == pytest.approx(a["bias"])
    assert b["coverage"] == a["coverage"]
    assert b["bias_mcse"] * math.sqrt(2) == pytest.approx(a["bias_mcse"], rel=0.01)


def test_clopper_pearson_closed_forms():
    lo, hi = clopper_pearson(0, 10)
    assert lo == 0
    assert hi == pytest.approx(1 - 0.025 ** (1 / 10), abs=1e-10)
    assert hi == pytest.approx(0.3085, abs=1e-4)
    lo, hi = clopper_pearson(10, 10)
    assert hi == 1 and lo == pytest.approx(0.025 ** (1 / 10), abs=1e-10)
    lo, hi = clopper_pearson(5, 10)
    assert lo < 0.5 < hi and (0.5 - lo) == pytest.approx(hi - 0.5, abs=1e-12)
    with pytest.raises(ValueError):
        clopper_pearson(3, 2)
    with pytest.raises(ValueError):
        clopper_pearson(0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200))
def test_clopper_pearson_monotone_in_k(n):
    bounds = np.array([clopper_pearson(k, n) for k in range(n + 1)])
    assert np.all(np.diff(bounds[:, 0]) >= 0)
    assert np.all(np.diff(bounds[:, 1]) >= 0)


def test_plan_nsim():
    assert plan_nsim(math.sqrt(FIRST_STAGE_NSIM) * 0.001, 0.001) == FIRST_STAGE_NSIM
    assert plan_nsim(0.0247, 0.001) == 611
    assert plan_nsim(0.05, 0.05) == 1
    with pytest.raises(ValueError):
        plan_nsim(0.0, 0.001)


def _records(points, ses, label="s", method="IPW", estimand="ATE", scale="RD", status=None):
    n = len(points)
    points = np.asarray(points, float)
    ses = np.asarray(ses, float)
    if scale == "OR":
        lo, hi = points * np.exp(-1.96 * ses), points * np.exp(1.96 * ses)
    else:
        lo, hi = points - 1.96 * ses, points + 1.96 * ses
    return pd.DataFrame({
        "scenario_label": label, "iteration": np.arange(n), "method": method, "estimand": estimand,
        "scale": scale, "point": points, "se": ses, "ci_low": lo, "ci_high": hi,
        "status": status if status is not None else ["ok"] * n, "zero_event": "none",
    })


def test_summarize_counts_failures_and_exclusions():
    df = _records([0.1, 0.2, np.nan, np.nan, 0.15], [0.05] * 5,
                  status=["ok", "ok", "non_convergent", "excluded", "ok"])
    (s,) = summarize(df, {("s", "ATE", "RD"): 0.1})
    assert (s.n_total, s.n_used, s.n_failed, s.n_excluded) == (5, 3, 1, 1)
    assert s.n_used + s.n_failed + s.n_excluded == 5
    assert s.failure_rate == pytest.approx(1 / 4)
    assert (s.failure_cp_low, s.failure_cp_high) == pytest.approx(clopper_pearson(1, 4))
    assert s.bias == pytest.approx(0.05)


def test_summarize_or_on_log_scale():
    pts = np.array([1.5, 2.0, 2.5, 3.0])
    (s,) = summarize(_records(pts, [0.2] * 4, scale="OR"), {("s", "ATE", "OR"): 2.0})
    assert s.bias == pytest.approx(np.mean(np.log(pts)) - math.log(2.0))
    assert s.emp_se == pytest.approx(np.std(np.log(pts), ddof=1))
    inside = np.mean((pts * np.exp(-1.96 * 0.2) <= 2.0) & (2.0 <= pts * np.exp(1.96 * 0.2)))
    assert s.coverage == inside


def test_summarize_order_invariant_and_truth_frame():
    rng = np.random.default_rng(2)
    df = _records(rng.normal(0.1, 0.05, 50), [0.05] * 50)
    truths = pd.DataFrame({"scenario_label": ["s"], "ate_rd": [0.1]})
    a = summarize(df, truths)[0]
    b = summarize(df.sample(frac=1, random_state=3), truths)[0]
    assert a.bias == pytest.approx(b.bias, abs=1e-15)
    assert a.mse == pytest.approx(b.mse, abs=1e-15)
    assert a.coverage == b.coverage


def test_zipper_data():
    rng = np.random.default_rng(4)
    df = _records(rng.normal(0, 1, 20), [1.0] * 20)
    z = zipper_data(df, {("s", "ATE", "RD"): 0.0})
    assert len(z) == 20
    assert z["z_centile"].max() == 100
    assert np.all(z["covers"] == (z["abs_z"] <= 1.96 + 1e-12))
