import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from betel.dgp import example1_model, gen_example1
from betel.etel import INTERIOR, hull_check
from betel.posterior import (LogPosterior, McmcConfig, MixingWarning, PointMassPrior, Proposal, StudentTPrior,
                             TailoringError, fd_hessian, gmm_estimate, inefficiency_factor, maximize,
                             moment_start, random_blocks, repair_precision, run_one_block, run_tarb, summarize,
                             tailor_proposal, training_sample_prior)
from oracles import student_t_logpdf


class GaussianTarget:
    """Log density of N(mu, Sigma) dressed up like a LogPosterior."""

    def __init__(self, mu, cov):
        self.mu = np.asarray(mu, float)
        self.prec = np.linalg.inv(cov)
        self.model = SimpleNamespace(param_names=[f"t{j}" for j in range(self.mu.size)])
        self.evaluations = 0

    def proposal(self, dof=15.0):
        return tailor_proposal(self, [self.mu + 1.0], dof)

    @property
    def p(self):
        return self.mu.size

    def __call__(self, x):
        self.evaluations += 1
        r = np.asarray(x, float) - self.mu
        return -0.5 * r @ self.prec @ r

    def value_and_grad(self, x, params=None):
        r = np.asarray(x, float) - self.mu
        g = -self.prec @ r
        return self(x), (g if params is None else g[params])


# ---------------------------------------------------------------- priors ---

@given(st.floats(-50, 50), st.floats(-3, 3), st.floats(0.1, 20), st.floats(0.5, 30))
def test_student_t_prior_matches_closed_form(x, loc, scale, dof):
    prior = StudentTPrior([loc], scale, dof)
    assert prior.logpdf([x]) == pytest.approx(student_t_logpdf(x, loc, scale, dof), rel=1e-10, abs=1e-10)
    assert prior.logpdf([x]) == pytest.approx(stats.t.logpdf(x, dof, loc, scale), rel=1e-10, abs=1e-10)


def test_prior_is_product_and_gradient(rng):
    prior = StudentTPrior([0.0, 1.0, -2.0], [1.0, 2.0, 0.5], [2.5, 5.0, 30.0])
    x = rng.normal(size=3)
    parts = [student_t_logpdf(x[j], prior.location[j], prior.scale[j], prior.dof[j]) for j in range(3)]
    assert prior.logpdf(x) == pytest.approx(sum(parts))
    h = 1e-6
    fd = [(prior.logpdf(x + h * e) - prior.logpdf(x - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(prior.grad(x), fd, rtol=1e-6)


def test_prior_validation_and_sampling(rng):
    with pytest.raises(ValueError):
        StudentTPrior([0.0], -1.0, 2.5)
    with pytest.raises(ValueError):
        StudentTPrior([0.0], 1.0, 0.0)
    draws = StudentTPrior.default(2, scale=2.0, dof=30).sample(rng, 20000)
    np.testing.assert_allclose(draws.std(axis=0), 2.0 * np.sqrt(30 / 28), rtol=0.05)
    assert np.all(PointMassPrior([1.0, 2.0]).sample(rng, 5) == [1.0, 2.0])


# ----------------------------------------------------------- estimators ---

def test_moment_start_recovers_linear_coefficients():
    data = gen_example1(2000, seed=3)
    est = moment_start(example1_model(data, 3))
    np.testing.assert_allclose(est, [1.0, 1.0], atol=0.1)


def test_gmm_estimate_has_positive_standard_errors():
    data = gen_example1(500, seed=4)
    est, se = gmm_estimate(example1_model(data, 3))
    assert np.all(se > 0) and np.all(se < 0.5)
    assert np.all(np.abs(est - 1.0) < 5 * se)


def test_training_sample_prior(ex1_data):
    m = example1_model(ex1_data.head(100), 3)
    prior = training_sample_prior(m, "gmm", multiplier=2.0, dof=5.0)
    est, se = gmm_estimate(m)
    np.testing.assert_allclose(prior.location, est)
    np.testing.assert_allclose(prior.scale, 2.0 * se)
    assert np.all(prior.dof == 5.0)
    with pytest.raises(ValueError):
        training_sample_prior(m, "bogus")


# ------------------------------------------------------------ posterior ---

def test_log_posterior_is_prior_plus_etel(ex1_logpost):
    theta = np.array([1.0, 1.0])
    assert ex1_logpost(theta) == pytest.approx(ex1_logpost.log_etel(theta) + ex1_logpost.prior.logpdf(theta))
    assert ex1_logpost([50.0, -50.0]) == -np.inf
    assert ex1_logpost.value_and_grad([50.0, -50.0]) == (-np.inf, None)


def test_prior_dimension_mismatch(ex1_model):
    with pytest.raises(ValueError):
        LogPosterior(ex1_model, StudentTPrior.default(3))


def test_posterior_gradient_matches_finite_differences(ex1_logpost):
    theta = np.array([0.95, 1.05])
    _, g = ex1_logpost.value_and_grad(theta)
    h = 1e-6
    fd = [(ex1_logpost(theta + h * e) - ex1_logpost(theta - h * e)) / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-4)


# --------------------------------------------------------- optimisation ---

def test_maximize_quadratic():
    target = GaussianTarget([1.0, -2.0, 0.5], np.diag([1.0, 4.0, 0.25]))
    x, f, g = maximize(target.value_and_grad, np.zeros(3))
    # stops once the predicted gain is below 1e-10, so x is accurate to ~sqrt(1e-10)
    np.testing.assert_allclose(x, target.mu, atol=1e-4)
    assert f == pytest.approx(0.0, abs=1e-9)


def test_maximize_backtracks_off_minus_inf():
    def fg(x):
        if x[0] > 0.5:
            return -np.inf, None
        return -float((x[0] - 0.4) ** 2), np.array([-2 * (x[0] - 0.4)])
    x, _, _ = maximize(fg, np.array([-3.0]))
    assert x[0] == pytest.approx(0.4, abs=1e-6)


def test_fd_hessian_and_tailoring_on_gaussian():
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    target = GaussianTarget([0.2, -0.1], cov)
    np.testing.assert_allclose(-fd_hessian(target.value_and_grad, np.zeros(2)), np.linalg.inv(cov), atol=1e-6)
    prop = tailor_proposal(target, [np.array([3.0, 3.0])], dof=15)
    np.testing.assert_allclose(prop.mode, target.mu, atol=1e-7)
    np.testing.assert_allclose(prop.scale, cov, atol=1e-6)


def test_tailoring_fails_without_finite_start(ex1_logpost):
    with pytest.raises(TailoringError):
        tailor_proposal(ex1_logpost, [np.array([100.0, 100.0])])


def test_repair_precision():
    P = np.array([[1.0, 0.0], [0.0, -2.0]])
    R = repair_precision(P, floor=1e-3)
    assert np.linalg.eigvalsh(R)[0] == pytest.approx(1e-3)
    np.testing.assert_array_equal(repair_precision(np.eye(2)), np.eye(2))


def test_proposal_density_matches_scipy(rng):
    scale = np.array([[2.0, 0.5], [0.5, 1.0]])
    prop = Proposal([1.0, -1.0], scale, 7.0)
    x = rng.normal(size=(5, 2))
    ref = stats.multivariate_t(loc=[1.0, -1.0], shape=scale, df=7.0).logpdf(x)
    np.testing.assert_allclose(prop.logpdf(x), ref)
    assert prop.logpdf(x[0]) == pytest.approx(ref[0])


# ------------------------------------------------------------ samplers ---

def test_one_block_with_exact_proposal_accepts_everything():
    scale = np.array([[1.0, 0.2], [0.2, 0.5]])
    prop = Proposal([0.0, 1.0], scale, 6.0)

    class Target:
        model = SimpleNamespace(param_names=["a", "b"])
        evaluations = 0

        def __call__(self, x):
            return prop.logpdf(x)

    target = Target()
    out = run_one_block(target, McmcConfig(draws=2000, burn_in=10, seed=1), proposal=prop)
    assert out.acceptance_rate == 1.0
    np.testing.assert_allclose(out.inefficiency, 1.0, atol=0.25)


def test_one_block_targets_gaussian():
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    target = GaussianTarget([1.0, -1.0], cov)
    out = run_one_block(target, McmcConfig(draws=20000, burn_in=200, seed=5), target.proposal())
    se = np.sqrt(np.diag(cov) * out.inefficiency / 20000)
    assert np.all(np.abs(out.mean - target.mu) < 4 * se)
    np.testing.assert_allclose(np.cov(out.draws.T), cov, rtol=0.08)
    assert out.acceptance_rate > 0.8


def test_tarb_targets_gaussian():
    cov = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.3], [0.0, 0.3, 1.0]])
    target = GaussianTarget([0.5, 0.0, -0.5], cov)
    out = run_tarb(target, McmcConfig(sampler="tarb", draws=3000, burn_in=50, seed=2),
                   global_proposal=target.proposal())
    np.testing.assert_allclose(out.mean, target.mu, atol=0.12)
    np.testing.assert_allclose(out.sd, 1.0, atol=0.1)
    assert out.block_acceptance.shape == (3000,)


def test_tarb_requires_two_parameters():
    with pytest.raises(ValueError):
        run_tarb(GaussianTarget([0.0], [[1.0]]), McmcConfig(sampler="tarb", draws=10, burn_in=0))


def test_independence_sampler_detailed_balance_on_discrete_toy():
    # M-H kernel on 3 states with an independence proposal must leave pi invariant
    pi = np.array([0.2, 0.5, 0.3])
    q = np.array([0.5, 0.25, 0.25])
    K = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            if i != j:
                K[i, j] = q[j] * min(1.0, pi[j] * q[i] / (pi[i] * q[j]))
        K[i, i] = 1.0 - K[i].sum()
    flux = pi[:, None] * K
    np.testing.assert_allclose(flux, flux.T, atol=1e-15)
    np.testing.assert_allclose(pi @ K, pi, atol=1e-15)


def test_ex1_draws_lie_inside_hull(ex1_logpost, ex1_model):
    out = run_one_block(ex1_logpost, McmcConfig(draws=600, burn_in=50, seed=3))
    assert np.all(np.isfinite(out.log_posterior))
    sub = out.draws[np.random.default_rng(0).choice(600, 30, replace=False)]
    assert all(hull_check(ex1_model.expand(t)).status == INTERIOR for t in sub)
    s = out.summaries["theta1"] if "theta1" in out.summaries else out.summaries[out.param_names[-1]]
    assert s["q05"] <= s["median"] <= s["q95"]


def test_mixing_warning_when_nothing_is_accepted():
    target = GaussianTarget([0.0], [[1e-6]])
    prop = Proposal([0.0], [[100.0]], 15.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # the stuck chain is constant
        warnings.simplefilter("error", MixingWarning)
        with pytest.raises(MixingWarning):
            run_one_block(target, McmcConfig(draws=400, burn_in=0, seed=0, mixing_window=200), proposal=prop)


def test_mcmc_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(sampler="gibbs")
    with pytest.raises(ValueError):
        McmcConfig(draws=0)
    with pytest.raises(ValueError):
        McmcConfig(new_block_probability=1.0)


# ------------------------------------------------------------- blocking ---

@given(st.integers(1, 30), st.floats(0.01, 0.99), st.integers(0, 10_000))
def test_random_blocks_partition(p, prob, seed):
    blocks = random_blocks(np.random.default_rng(seed), p, prob)
    assert sorted(np.concatenate(blocks).tolist()) == list(range(p))


def test_block_probability_extremes():
    rng = np.random.default_rng(0)
    assert all(len(random_blocks(rng, 10, 0.999999)) == 10 for _ in range(20))
    assert all(len(random_blocks(rng, 10, 1e-9)) == 1 for _ in range(20))
    sizes = [len(random_blocks(rng, 10, 0.3)) for _ in range(4000)]
    assert np.mean(sizes) == pytest.approx(1 + 9 * 0.3, abs=0.05)


# ---------------------------------------------------------- diagnostics ---

def test_inefficiency_iid_and_ar1(rng):
    assert inefficiency_factor(rng.normal(size=20000)) == pytest.approx(1.0, abs=0.15)
    phi = 0.5
    e = rng.normal(size=50000)
    x = np.empty_like(e)
    x[0] = e[0]
    for t in range(1, e.size):
        x[t] = phi * x[t - 1] + e[t]
    assert inefficiency_factor(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)


def test_inefficiency_antithetic_chain_below_one(rng):
    e = rng.normal(size=20000)
    x = np.empty_like(e)
    x[0] = e[0]
    for t in range(1, e.size):
        x[t] = -0.5 * x[t - 1] + e[t]
    assert inefficiency_factor(x) < 1.0


def test_inefficiency_edge_cases():
    with pytest.warns(RuntimeWarning):
        assert np.isnan(inefficiency_factor(np.ones(200)))
    with pytest.raises(ValueError):
        inefficiency_factor(np.zeros(50))


def test_summaries_order_and_keys(rng):
    s = summarize(rng.normal(size=(500, 2)), ["a", "b"])
    assert list(s) == ["a", "b"]
    for v in s.values():
        assert v["q05"] < v["median"] < v["q95"]
        assert set(v) == {"mean", "sd", "median", "q05", "q95", "ineff"}


def test_mc_standard_error_formula():
    target = GaussianTarget([0.0, 0.0], np.eye(2))
    out = run_one_block(target, McmcConfig(draws=1000, burn_in=10, seed=9), target.proposal())
    np.testing.assert_allclose(out.mc_standard_error(), out.sd * np.sqrt(out.inefficiency / 1000))
    d = out.summary_dict()
    assert d["draws"] == 1000 and d["sampler"] == "one_block"


def test_sampler_is_seed_deterministic():
    target = GaussianTarget([0.0], [[1.0]])
    a = run_one_block(target, McmcConfig(draws=300, burn_in=0, seed=4), target.proposal())
    b = run_one_block(target, McmcConfig(draws=300, burn_in=0, seed=4), target.proposal())
    np.testing.assert_array_equal(a.draws, b.draws)
