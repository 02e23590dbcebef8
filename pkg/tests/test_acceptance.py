"""Acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines, or directly
with ``python3 tests/test_acceptance.py``.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from test_estimators import PSM_A, PSM_HAND, PSM_S, PSM_Y, _central_diff  # noqa: E402
from test_glm import SIX_Y, _six_design, grid_search_maximizer  # noqa: E402
from test_matching import brute_force_cost, check_structure  # noqa: E402

from gmethods import glm  # noqa: E402
from gmethods.cli import main as cli_main  # noqa: E402
from gmethods.dgm import (FIRST_STAGE_SLOPES, Scenario, ZeroEventStatus, calibrate_alpha, generate_sample,  # noqa: E402
                          second_stage_scenarios, true_estimands)
from gmethods.engine import ExperimentPlan, iter_records, records_frame  # noqa: E402
from gmethods.estimators import (CausalData, Method, Scale, Status, estimate_all, estimate_psm_fm,  # noqa: E402
                                 fit_outcome, fit_propensity, gcomp_functional, gcomp_gradients, hajek_means,
                                 ipw_weights, outcome_design, ps_design, tmle_fluctuate)
from gmethods.matching import Estimand, FullMatch, full_match, match_weights, subclass_counts  # noqa: E402
from gmethods.metrics import clopper_pearson, summaries_frame, summarize  # noqa: E402
from gmethods.report import DatasetProfile, recommend  # noqa: E402
from scipy.special import logit  # noqa: E402

RESULTS = {}


def report(cid, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] C{cid} {title}: {detail}"
    RESULTS[cid] = (ok, line)
    print(line)
    return ok


# 1 -------------------------------------------------------------------------

CALIBRATION_SLOPES = {80: 1.85, 65: 3.54, 50: 5.90, 35: 10.60, 20: 22.61}
SECOND_STAGE = {0.25: -1.25, 0.5: 0.0, 0.75: 1.25}


def check_calibration():
    t0 = time.perf_counter()
    misses, parts = [], []
    for ov, ref in CALIBRATION_SLOPES.items():
        c = calibrate_alpha(ov, 0.5, eval_n=10**6)
        rel = c.alpha1 / ref - 1
        parts.append(f"{ov}%: {c.alpha1:.3f} ({rel:+.1%})")
        if abs(rel) > 0.05:
            misses.append(f"PS-OV {ov}% slope {c.alpha1:.3f} vs {ref}")
    for tp, a0_ref in SECOND_STAGE.items():
        c = calibrate_alpha(60, tp, eval_n=10**6)
        parts.append(f"60%/{tp}: a1 {c.alpha1:.3f} a0 {c.alpha0:+.3f}")
        if abs(c.alpha1 - 4.25) > 0.2:
            misses.append(f"treated {tp} slope {c.alpha1:.3f} vs 4.25")
        if abs(c.alpha0 - a0_ref) > 0.1:
            misses.append(f"treated {tp} alpha0 {c.alpha0:+.3f} vs {a0_ref:+.2f}")
    elapsed = time.perf_counter() - t0
    if elapsed > 300:
        misses.append(f"runtime {elapsed:.0f}s")
    detail = "; ".join(parts) + f"; {elapsed:.0f}s"
    if misses:
        detail += " | misses: " + "; ".join(misses)
    return report(1, "calibration reproduction", not misses, detail)


# 2 -------------------------------------------------------------------------

def check_worked_individual():
    s = Scenario(0.0, 1.0, 1.0, beta0=0.0, beta1=-5.0, n=1)
    l1, l2 = np.array([1.2]), np.array([0.6])
    diff = s.risk_untreated(l1, l2)[0] - s.risk_treated(l1, l2, np.array([1.0]))[0]
    return report(2, "worked individual", abs(diff - 0.593) <= 5e-4, f"P(Y0=1)-P(Y1=1) = {diff:.5f}")


# 3 -------------------------------------------------------------------------

def _simulate(scenario, nsim, base_seed=2024, **kw):
    plan = ExperimentPlan([scenario], nsim=nsim, base_seed=base_seed, **kw)
    return records_frame(plan, iter_records(plan))


def check_null_effect():
    s = Scenario(0.0, FIRST_STAGE_SLOPES[80], FIRST_STAGE_SLOPES[80], 0.0, 0.0, n=500, label="null")
    df = _simulate(s, 500)
    summ = summaries_frame(summarize(df, {"null": true_estimands(s, superpop_n=10**6)}))
    bad, worst_z = [], 0.0
    for r in summ.itertuples():
        z = abs(r.bias) / r.bias_mcse
        worst_z = max(worst_z, z)
        if z >= 3:
            bad.append(f"{r.method}/{r.estimand}/{r.scale} |bias|/MCSE={z:.2f}")
        if r.scale == "RD" and not 0.92 <= r.coverage <= 0.98:
            bad.append(f"{r.method}/{r.estimand} RD coverage {r.coverage:.3f}")
    cov = summ[summ.scale == "RD"].coverage
    detail = (f"max |bias|/MCSE {worst_z:.2f} over {len(summ)} cells; RD coverage {cov.min():.3f}-{cov.max():.3f}; "
              f"n_used min {summ.n_used.min()}")
    if bad:
        detail += " | " + "; ".join(bad)
    return report(3, "null-effect property suite", not bad, detail)


# 4 -------------------------------------------------------------------------

def check_large_sample():
    bad, parts = [], []
    for b1 in (-0.2, -1.0):
        s = Scenario(0.0, 1.85, 1.85, 0.0, b1, n=10**5)
        truth = true_estimands(s, superpop_n=10**7)
        data = CausalData.from_sample(generate_sample(s, 11))
        worst = 0.0
        for e in estimate_all(data, scales=[Scale.RD]):
            t = truth.value(e.estimand.value, "RD")
            z = abs(e.point - t) / e.se if e.status is Status.OK else math.inf
            worst = max(worst, z)
            if z > 3:
                bad.append(f"b1={b1} {e.method.value}/{e.estimand.value} z={z:.2f}")
        parts.append(f"b1={b1}: max |z| {worst:.2f}")
    return report(4, "large-sample consistency", not bad, "; ".join(parts + bad))


# 5 -------------------------------------------------------------------------

def check_first_stage_direction():
    slope = FIRST_STAGE_SLOPES[35]
    s = Scenario(0.0, slope, slope, 0.0, -5.0, n=1000, label="ov35")
    df = _simulate(s, 200, scales=["RD"])
    summ = summaries_frame(summarize(df, {"ov35": true_estimands(s, superpop_n=10**7)}))
    bias = {(r.method, r.estimand): abs(r.bias) for r in summ.itertuples()}
    mcse = {(r.method, r.estimand): r.bias_mcse for r in summ.itertuples()}
    ate_ok = bias["GCOMP", "ATE"] > bias["IPW", "ATE"] and bias["GCOMP", "ATE"] > bias["TMLE", "ATE"]
    att = {m.value: bias[m.value, "ATT"] for m in Method}
    att_ok = att["GCOMP"] == min(att.values())
    fmt = lambda e: ", ".join(f"{m.value} {bias[m.value, e]:.4f}±{mcse[m.value, e]:.4f}" for m in Method)
    detail = f"|bias| ATE [{fmt('ATE')}] ({'ok' if ate_ok else 'not met'}); ATT [{fmt('ATT')}] " \
             f"({'ok' if att_ok else 'G-comp not minimal'})"
    return report(5, "qualitative first-stage direction", ate_ok and att_ok, detail)


# 6 -------------------------------------------------------------------------

def check_zero_event_rate():
    s = next(x for x in second_stage_scenarios() if x.label == "s2_tr75_mild_n100")
    plan = ExperimentPlan([s], nsim=610)
    counts = {z: 0 for z in ZeroEventStatus}
    for rec in iter_records(plan):
        counts[rec.zero_event] += 1
    k = counts[ZeroEventStatus.ALL_ZERO]
    lo, hi = clopper_pearson(k, 610)
    ok = lo <= 0.021 and hi >= 0.004
    arm = counts[ZeroEventStatus.TREATED_ARM_ZERO] + counts[ZeroEventStatus.CONTROL_ARM_ZERO]
    detail = f"all-zero {k}/610 = {k / 610:.2%}, CP ({lo:.4f}, {hi:.4f}); one-arm-zero {arm / 610:.1%}"
    return report(6, "zero-event rate", ok, detail)


# 7 -------------------------------------------------------------------------

def check_structural():
    rng = np.random.default_rng(7)
    bad = []
    for trial in range(60):
        n = int(rng.integers(4, 300))
        a = rng.integers(0, 2, n)
        if a.sum() in (0, n):
            continue
        ps = rng.uniform(0.02, 0.98, n)
        m = full_match(ps, a)
        try:
            check_structure(m, a)
        except AssertionError:
            bad.append(f"partition trial {trial}")
        att = match_weights(m, a, "ATT").w
        if not np.all(att[a == 1] == 1.0):
            bad.append(f"ATT treated weight trial {trial}")
        ate = match_weights(m, a, "ATE").w
        n1, n0, nk = subclass_counts(m.subclass, a)
        t_sum = np.bincount(m.subclass, weights=ate * a, minlength=m.n_subclasses)
        c_sum = np.bincount(m.subclass, weights=ate * (1 - a), minlength=m.n_subclasses)
        if np.max(np.abs(t_sum - c_sum)) > 1e-10:
            bad.append(f"ATE balance trial {trial}")
    score_max = 0.0
    for seed in range(5):
        data = CausalData.from_sample(generate_sample(Scenario(0.0, 3.54, 3.54, 0.0, -1.0, n=800), seed))
        ps = glm.predict_prob(fit_propensity(data), ps_design(data)[0])
        of = fit_outcome(data)
        q1 = glm.predict_prob(of, outcome_design(data, 1.0)[0])
        q0 = glm.predict_prob(of, outcome_design(data, 0.0)[0])
        for targeting in ("ATE", "ATT"):
            tf = tmle_fluctuate(data, ps, q1, q0, targeting)
            q = np.where(data.a == 1, tf.q1_treated, tf.q1_control)
            score_max = max(score_max, abs(np.sum(tf.h_treated * (data.y - q))),
                            abs(np.sum(tf.h_control * (data.y - q))))
        w = ipw_weights(ps, data.a, "ATE")
        if hajek_means(data.y, data.a, w * 8.0) != hajek_means(data.y, data.a, w):
            bad.append(f"Hajek invariance seed {seed}")
    if score_max > 1e-6:
        bad.append(f"TMLE score {score_max:.2e}")
    detail = f"60 matching instances, TMLE max |score| {score_max:.1e}"
    return report(7, "structural invariants", not bad, detail + ("; " + "; ".join(bad) if bad else ""))


# 8 -------------------------------------------------------------------------

def check_micro_oracles():
    bad = []
    fit = glm.fit_logistic(_six_design(), SIX_Y)
    irls_err = float(np.max(np.abs(fit.coefficients - grid_search_maximizer())))
    if irls_err > 1e-6:
        bad.append(f"IRLS {irls_err:.1e}")
    rng = np.random.default_rng(8)
    match_err = 0.0
    for _ in range(100):
        a = rng.integers(0, 2, 6)
        if a.sum() in (0, 6):
            continue
        ps = rng.uniform(0.05, 0.95, 6)
        match_err = max(match_err, abs(full_match(ps, a).total_distance - brute_force_cost(logit(ps), a)))
    if match_err > 1e-9:
        bad.append(f"matching {match_err:.1e}")
    data12 = CausalData(PSM_Y, PSM_A, np.linspace(0, 1, 12))
    psm_err = 0.0
    for est in ("ATE", "ATT"):
        r = estimate_psm_fm(data12, est, match=FullMatch(PSM_S, 4, 0.0))
        psm_err = max(psm_err, abs(r.get("RD").point - (PSM_HAND[est][0] - PSM_HAND[est][1])))
    if psm_err > 1e-9:
        bad.append(f"PSM-FM {psm_err:.1e}")
    data = CausalData.from_sample(generate_sample(Scenario(0.0, 1.85, 1.85, 0.0, -1.0, n=800), 1))
    of = fit_outcome(data)
    X1, X0 = outcome_design(data, 1.0)[0], outcome_design(data, 0.0)[0]
    grad_err = 0.0
    for mask in (np.ones(data.n, bool), data.a == 1):
        g1, g0 = gcomp_gradients(of.coefficients, X1, X0, mask)
        for k, g in ((0, g1), (1, g0)):
            fd = _central_diff(lambda b: gcomp_functional(b, X1, X0, mask)[k], of.coefficients)
            grad_err = max(grad_err, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-12))))
    if grad_err > 1e-6:
        bad.append(f"gradients {grad_err:.1e}")
    detail = (f"IRLS {irls_err:.1e}, full match vs enumeration {match_err:.1e}, PSM-FM 12-unit {psm_err:.1e}, "
              f"delta gradients rel {grad_err:.1e}")
    return report(8, "estimator micro-oracles", not bad, detail)


# 9 -------------------------------------------------------------------------

def check_recommendations():
    covid = DatasetProfile(534, 0.635, 0.403, 63.85, -0.746)
    surgery = DatasetProfile(3635, 0.228, 0.258, 69.6, -0.673)
    got = {}
    for name, prof in (("COVID", covid), ("surgery", surgery)):
        for est in ("ATE", "ATT"):
            got[name, est] = sorted(m.value for m in recommend(prof, est).recommended)
    ok = all(got[k, "ATE"] == ["IPW", "TMLE"] and got[k, "ATT"] == ["GCOMP"] for k in ("COVID", "surgery"))
    return report(9, "recommendation contract", ok, ", ".join(f"{k[0]} {k[1]} {v}" for k, v in got.items()))


# 10 ------------------------------------------------------------------------

def check_determinism(tmp_dir: Path):
    plan = ExperimentPlan([Scenario(0.0, 1.85, 1.85, 0.0, -1.0, n=200, label="d1"),
                           Scenario(1.25, 4.25, 4.25, -2.5, -1.0, n=100, label="d2")], nsim=8, base_seed=31)
    path = tmp_dir / "plan.json"
    plan.save(path)
    outs = []
    for k, workers in enumerate((1, 1, 2)):
        out = tmp_dir / f"run{k}"
        rc = cli_main(["--out-dir", str(out), "--workers", str(workers), "simulate", "--plan", str(path)])
        outs.append((rc, (out / "raw_results.csv").read_bytes()))
    ok = all(rc == 0 for rc, _ in outs) and outs[0][1] == outs[1][1] == outs[2][1]
    return report(10, "determinism", ok, f"3 runs (workers 1, 1, 2), {len(outs[0][1])} bytes each, identical={ok}")


# pytest entry points --------------------------------------------------------

def test_c01_calibration_reproduction():
    assert check_calibration(), RESULTS[1][1]


def test_c02_worked_individual():
    assert check_worked_individual(), RESULTS[2][1]


def test_c03_null_effect_suite():
    assert check_null_effect(), RESULTS[3][1]


def test_c04_large_sample_consistency():
    assert check_large_sample(), RESULTS[4][1]


def test_c05_first_stage_direction():
    assert check_first_stage_direction(), RESULTS[5][1]


def test_c06_zero_event_rate():
    assert check_zero_event_rate(), RESULTS[6][1]


def test_c07_structural_invariants():
    assert check_structural(), RESULTS[7][1]


def test_c08_micro_oracles():
    assert check_micro_oracles(), RESULTS[8][1]


def test_c09_recommendation_contract():
    assert check_recommendations(), RESULTS[9][1]


def test_c10_determinism(tmp_path):
    assert check_determinism(tmp_path), RESULTS[10][1]


if __name__ == "__main__":
    import tempfile

    checks = [check_calibration, check_worked_individual, check_null_effect, check_large_sample,
              check_first_stage_direction, check_zero_event_rate, check_structural, check_micro_oracles,
              check_recommendations]
    for c in checks:
        c()
    with tempfile.TemporaryDirectory() as d:
        check_determinism(Path(d))
    n_pass = sum(ok for ok, _ in RESULTS.values())
    print(f"{n_pass}/{len(RESULTS)} criteria passed")
    sys.exit(0 if n_pass == len(RESULTS) else 1)
