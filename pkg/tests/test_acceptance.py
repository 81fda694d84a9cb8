"""Acceptance criteria.

Each test prints one ``[PASS]``/``[FAIL]`` line (also collected in the
terminal summary) and then asserts on it. Tolerances are fixed; long
experiments run at desk scale (50 or 100 repetitions). Run only these with
``pytest -m acceptance -s``.
"""
import time
import warnings

import numpy as np
import pytest
from scipy.special import logsumexp

from betel.dgp import (ExperimentSpec, example1_model, example4_model, gen_example1, gen_example4, generate,
                       iv_conditioning_model, pseudo_true_value, run_repeated)
from betel.etel import INDETERMINATE, INTERIOR, evaluate, hull_check, solve_tilting
from betel.marglik import MlConfig, hull_volume, marginal_likelihood, sparsity_search
from betel.posterior import (LogPosterior, McmcConfig, StudentTPrior, default_starts, run_one_block, run_tarb,
                             tailor_proposal, training_sample_prior)
from oracles import primal_etel_probabilities

pytestmark = pytest.mark.acceptance

REFERENCE_VOLUMES = {2: 0.76, 5: 0.73, 10: 0.68, 15: 0.60, 20: 0.54}
REFERENCE_K5 = {"theta0": (1.07, 0.10), "theta1": (1.03, 0.12)}


def random_instance(rng, n_max=30, m_max=3):
    n = int(rng.integers(4, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    shift = rng.choice([0.2, 1.0, 2.0, 3.0])
    return rng.standard_normal((n, m)) * rng.uniform(0.1, 10.0, m) + rng.normal(scale=shift, size=m)


@pytest.fixture(scope="module")
def pseudo_true():
    return pseudo_true_value(N=500_000, K=26, fixed_intercept=0.5, seed=2024, restarts=5)


def _estimate_spec(n, fixed, truth, seed_base, K=None, reps=100, draws=5000):
    return ExperimentSpec("example1", n, "example1", K=K, repetitions=reps, draws=draws, burn_in=500,
                          template_params={"fixed_intercept": fixed}, truth={"theta1": truth},
                          seed_base=seed_base)


@pytest.fixture(scope="module")
def coverage_runs(pseudo_true):
    theta_o = float(pseudo_true.theta[0])
    return {"correct_250": run_repeated(_estimate_spec(250, 1.0, 1.0, 30_000)),
            "correct_1000": run_repeated(_estimate_spec(1000, 1.0, 1.0, 31_000)),
            "misspecified_1000": run_repeated(_estimate_spec(1000, 0.5, theta_o, 32_000))}


# ------------------------------------------------------------------- 1 ---

def test_c01_dual_matches_primal(report):
    rng = np.random.default_rng(101)
    t0 = time.time()
    worst_p, worst_grad, count = 0.0, 0.0, 0
    while count < 200:
        G = random_instance(rng)
        if hull_check(G).status != INTERIOR:
            continue
        ev = solve_tilting(G)
        p, _ = primal_etel_probabilities(G)
        worst_p = max(worst_p, float(np.max(np.abs(ev.probabilities - p))))
        worst_grad = max(worst_grad, float(np.linalg.norm(G.T @ ev.probabilities)))
        count += 1
    elapsed = time.time() - t0
    report(1, "ETEL dual vs primal", worst_p <= 1e-6 and worst_grad <= 1e-8 and elapsed < 60,
           f"max|p_dual-p_primal|={worst_p:.2e} (tol 1e-6), max dual gradient norm={worst_grad:.2e} "
           f"(tol 1e-8), {count} instances in {elapsed:.1f}s")


# ------------------------------------------------------------------- 2 ---

def test_c02_newton_agrees_with_lp(report):
    rng = np.random.default_rng(202)
    t0 = time.time()
    disagree = indeterminate = interior = 0
    protocol_disagree = 0
    for _ in range(1000):
        G = random_instance(rng)
        lp = hull_check(G).status
        ev = solve_tilting(G)
        interior += lp == INTERIOR
        if ev.hull_status == INDETERMINATE:
            indeterminate += 1
        elif ev.hull_status != lp:
            disagree += 1
        protocol_disagree += evaluate(G).hull_status != lp
    elapsed = time.time() - t0
    report(2, "Newton hull decisions vs LP", disagree == 0 and protocol_disagree == 0 and elapsed < 60,
           f"{disagree} disagreements, {indeterminate} indeterminate (LP decides), "
           f"{interior}/1000 interior, {elapsed:.1f}s")


# ------------------------------------------------------------------- 3 ---

def test_c03_volumes_and_posterior(report):
    t0 = time.time()
    data = gen_example1(250, seed=2026)
    vols = {}
    for K in REFERENCE_VOLUMES:
        model = example1_model(data, K)
        vols[K] = hull_volume(model, StudentTPrior.default(model.p), 2000, seed=K).volume
    model = example1_model(data, 5)
    out = run_one_block(LogPosterior(model, StudentTPrior.default(model.p)),
                        McmcConfig(draws=20000, burn_in=1000, seed=2026))
    vol_ok = all(abs(vols[K] - v) <= 0.08 for K, v in REFERENCE_VOLUMES.items())
    post_ok = all(abs(out.summaries[nm]["mean"] - m) <= 0.15 and abs(out.summaries[nm]["sd"] - s) <= 0.05
                  for nm, (m, s) in REFERENCE_K5.items())
    elapsed = time.time() - t0
    vol_txt = ", ".join(f"K={K}: {vols[K]:.3f} (target {v:.2f})" for K, v in REFERENCE_VOLUMES.items())
    post_txt = ", ".join(f"{nm} mean {out.summaries[nm]['mean']:.3f} sd {out.summaries[nm]['sd']:.3f}"
                         for nm in REFERENCE_K5)
    report(3, "Example 1 hull volumes and K=5 posterior", vol_ok and post_ok and elapsed < 900,
           f"volumes {vol_txt} [{'ok' if vol_ok else 'outside +-0.08'}]; K=5 {post_txt} "
           f"[{'ok' if post_ok else 'outside tolerance'}]; {elapsed:.0f}s")


# ------------------------------------------------------------------- 4 ---

def _grid_log_ml(logpost, centre, sd, points=200, width=6.0):
    g0 = np.linspace(centre[0] - width * sd[0], centre[0] + width * sd[0], points)
    g1 = np.linspace(centre[1] - width * sd[1], centre[1] + width * sd[1], points)
    vals = np.array([[logpost(np.array([a, b])) for b in g1] for a in g0])
    return float(logsumexp(vals) + np.log((g0[1] - g0[0]) * (g1[1] - g1[0])))


def test_c04_marginal_likelihood_vs_quadrature(report):
    t0 = time.time()
    diffs = []
    for seed, K in ((3, 2), (4, 3), (5, 5)):
        model = example1_model(gen_example1(250, seed=seed), K)
        lp = LogPosterior(model, StudentTPrior.default(model.p))
        out = run_one_block(lp, McmcConfig(draws=10000, burn_in=500, seed=1))
        ml = marginal_likelihood(lp, MlConfig(draws=10000, burn_in=500, seed=1), out)
        diffs.append(ml.log_ml - _grid_log_ml(lp, out.mean, out.sd))
    elapsed = time.time() - t0
    worst = max(abs(d) for d in diffs)
    report(4, "marginal likelihood identity vs tensor-grid quadrature", worst <= 0.05 and elapsed < 600,
           "differences " + ", ".join(f"{d:+.4f}" for d in diffs) + f" (tol 0.05), {elapsed:.0f}s")


# ------------------------------------------------------------------- 5 ---

def test_c05_model_selection_consistency(report):
    t0 = time.time()
    freq = {}
    for n in (100, 250, 1000):
        spec = ExperimentSpec("example2", n, "example2", task="compare", repetitions=50, draws=2000, burn_in=200,
                              seed_base=10_000 + n)
        freq[n] = run_repeated(spec).aggregates["selection_frequency"]
    elapsed = time.time() - t0
    ok = freq[1000]["M3"] >= 0.9 and all(f["M1"] <= 0.04 for f in freq.values()) and elapsed < 3600
    txt = "; ".join(f"n={n}: " + ", ".join(f"{m} {v:.0%}" for m, v in f.items()) for n, f in freq.items())
    report(5, "Example 2 selection frequencies", ok, f"{txt} (need M3>=90% at n=1000, M1<=2/50 everywhere), "
           f"{elapsed:.0f}s")


# ------------------------------------------------------------------- 6 ---

def test_c06_misspecification_bias(report, pseudo_true):
    theta_o = float(pseudo_true.theta[0])
    agg = {K: run_repeated(_estimate_spec(250, 0.5, theta_o, 20_000, K=K, reps=50)).aggregates["theta1"]
           for K in (5, 20)}
    b5, b20 = agg[5]["abs_bias"], agg[20]["abs_bias"]
    sd5 = agg[5]["posterior_sd"]
    ok = b5 <= b20 and abs(b5 - 0.044) <= 0.02 and abs(sd5 - 0.102) <= 0.02
    report(6, "Example 1 misspecified bias over K", ok,
           f"|bias| K=5 {b5:.4f} (target 0.044+-0.02), K=20 {b20:.4f} (need K5<=K20: {b5 <= b20}); "
           f"sd K=5 {sd5:.4f} (target 0.102+-0.02), sd K=20 {agg[20]['posterior_sd']:.4f}; truth {theta_o:.4f}")


# ------------------------------------------------------------------- 7 ---

def test_c07_pseudo_true_value(report, pseudo_true):
    value = float(pseudo_true.theta[0])
    report(7, "pseudo-true slope", abs(value - 1.004) <= 0.01,
           f"theta1 = {value:.5f} (target 1.004+-0.01) at N=5e5, K=26, theta0 fixed at 0.5")


# ------------------------------------------------------------------- 8 ---

def test_c08_coverage(report, coverage_runs):
    c250 = coverage_runs["correct_250"].aggregates["theta1"]["coverage"]
    c1000 = coverage_runs["correct_1000"].aggregates["theta1"]["coverage"]
    m1000 = coverage_runs["misspecified_1000"].aggregates["theta1"]["coverage"]
    ok = 0.83 <= c250 <= 0.97 and m1000 <= c1000 - 0.02
    report(8, "90% credible set coverage", ok,
           f"correct n=250 {c250:.2f} (need [0.83,0.97]); n=1000 correct {c1000:.2f}, "
           f"misspecified {m1000:.2f} (need <= correct - 0.02); 100 repetitions each")


# ------------------------------------------------------------------- 9 ---

def test_c09_root_n_contraction(report, coverage_runs):
    s250 = coverage_runs["correct_250"].aggregates["theta1"]["posterior_sd"]
    s1000 = coverage_runs["correct_1000"].aggregates["theta1"]["posterior_sd"]
    ratio = s1000 / s250
    report(9, "posterior sd scaling n=1000 vs n=250", abs(ratio - 0.5) <= 0.125,
           f"mean posterior sd {s250:.4f} -> {s1000:.4f}, ratio {ratio:.3f} (target 0.5 within 25%)")


# ------------------------------------------------------------------ 10 ---

def test_c10_tarb_dominance(report):
    t0 = time.time()
    data = gen_example4(1500, seed=7)
    count = 150
    prior = training_sample_prior(example4_model(data.head(count)), "2sls", multiplier=2.0, dof=5.0)
    lp = LogPosterior(example4_model(data.tail(count)), prior)
    proposal = tailor_proposal(lp, default_starts(lp))
    one = run_one_block(lp, McmcConfig(draws=50_000, burn_in=10_000, seed=1), proposal)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tarb = run_tarb(lp, McmcConfig("tarb", draws=3000, burn_in=1000, seed=1), global_proposal=proposal)
    se1, se2 = one.mc_standard_error(), tarb.mc_standard_error()
    mean_ok = np.abs(one.mean - tarb.mean) <= 2.0 * (se1 + se2)
    better = tarb.inefficiency <= one.inefficiency
    elapsed = time.time() - t0
    ok = bool(mean_ok.all()) and int(better.sum()) >= 18 and elapsed < 1800
    report(10, "TaRB-MH vs one-block", ok,
           f"means agree within 2 MC s.e. for {int(mean_ok.sum())}/20; TaRB ineff <= one-block for "
           f"{int(better.sum())}/20 (need 18); median ineff TaRB {np.median(tarb.inefficiency):.1f} vs "
           f"one-block {np.median(one.inefficiency):.1f}; acceptance {tarb.acceptance_rate:.2f}/"
           f"{one.acceptance_rate:.2f}; {elapsed:.0f}s")


# ------------------------------------------------------------------ 11 ---

def test_c11_sparsity_search(report):
    t0 = time.time()
    data = generate("iv_copula_highdim_z", 250, seed=1)
    candidates = ["z1", "z2"] + [f"z{j}" for j in range(4, 13)]

    def build(d, subset):
        model = iv_conditioning_model(d, [c for c in subset if c != "z3"], ["z3"], 3)
        return LogPosterior(model, StudentTPrior.default(model.p))

    comp = sparsity_search(data, candidates, ["z3"], build, max_size=3,
                           config=MlConfig(draws=5000, burn_in=500, seed=1), expected_count=66,
                           include_forced_only=False)
    elapsed = time.time() - t0
    probs = dict(zip(comp.model_ids, comp.probabilities))
    top = comp.ranking[:3]
    ok = comp.best == "(z2,z3)" and probs["(z2,z3)"] >= 0.6 and elapsed < 2700
    report(11, "sparsity search over 66 models", ok,
           f"top models {', '.join(f'{m} p={probs[m]:.3f}' for m in top)}; (z2,z3) rank "
           f"{comp.rank_of('(z2,z3)')} (need rank 1, p>=0.6); {len(comp.failures)} failures; {elapsed:.0f}s")
