import math

import numpy as np
import pytest
from scipy import optimize, stats

from funiform._rng import stream
from funiform.errors import InputError, NumericalError
from funiform.funspace import functional_uniform_logdensity, get_model
from funiform.inference import (
    Dataset,
    LikelihoodSpec,
    Posterior,
    PosteriorSample,
    PriorSpec,
    evaluate_scenario,
    log_posterior,
    median_mcse,
    posterior_mode,
    predictive_band,
    run_mh_batch,
    sample_posterior_isr,
    sample_posterior_mh,
    scenario_truth,
    simulate_dataset,
)
from funiform.metric_core import ParamBox
from funiform.prior_build import uniform_prior

GRID9 = np.arange(9) / 8.0


def linear_normal_data(seed=0, n=40, sigma=0.5):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 1, n)
    return Dataset(x, 1.0 + 2.0 * x + sigma * rng.standard_normal(n))


def ols(data):
    X = np.column_stack([np.ones_like(data.x), data.x])
    return np.linalg.lstsq(X, data.y, rcond=None)[0]


@pytest.fixture(scope="module")
def power_data():
    return simulate_dataset("power1", stream(99, 0, 0))


class TestDataset:
    def test_kinds(self):
        assert Dataset([0, 1], [1.0, 2.0]).kind == "normal"
        assert Dataset([0, 1], n=[5, 5], s=[1, 2]).kind == "binomial"

    def test_success_bound(self):
        with pytest.raises(InputError):
            Dataset([0.0], n=[3], s=[4])

    def test_region_checked(self):
        with pytest.raises(InputError):
            Posterior(get_model("power"), PriorSpec(), LikelihoodSpec("binomial"), Dataset([2.0], n=[1], s=[0]))

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x,n,s\n0,10,2\n0.5,10,7\n")
        d = Dataset.from_csv(path)
        assert d.kind == "binomial" and list(d.s) == [2, 7]
        path.write_text("a,b\n1,2\n")
        with pytest.raises(InputError):
            Dataset.from_csv(path)


class TestLogPosterior:
    def test_empty_dataset(self):
        m = get_model("exponential")
        val = log_posterior(m, PriorSpec("uniform"), LikelihoodSpec("normal", sigma=1.0), Dataset.empty(), [1.0])
        assert val == 0.0

    def test_binomial_single_row(self):
        m = get_model("power")
        data = Dataset([1.0], n=[1], s=[1])
        val = log_posterior(m, PriorSpec("uniform"), LikelihoodSpec("binomial"), data, [0.2, 0.3, 2.0])
        assert val == pytest.approx(math.log(0.5), abs=1e-15)

    def test_normal_zero_residuals(self):
        m = get_model("linear")
        x = np.array([0.0, 0.5, 1.0])
        data = Dataset(x, 1.0 + 2.0 * x)
        val = log_posterior(m, PriorSpec("uniform"), LikelihoodSpec("normal"), data, [1.0, 2.0], sigma=1.0)
        assert val == pytest.approx(-1.5 * math.log(2 * math.pi), abs=1e-13)

    def test_sigma_prior(self):
        m = get_model("linear")
        x = np.array([0.0, 1.0])
        data = Dataset(x, 1.0 + 2.0 * x)
        spec, lik = PriorSpec("uniform"), LikelihoodSpec("normal")
        a = log_posterior(m, spec, lik, data, [1.0, 2.0], sigma=2.0)
        assert a == pytest.approx(-math.log(2 * math.pi) - 2 * math.log(2.0) - 2 * math.log(2.0), abs=1e-13)

    @pytest.mark.parametrize("theta", [[0.7, 0.5, 1.0], [-0.1, 0.5, 1.0], [0.2, 0.3, 30.0]])
    def test_constraint_sentinel(self, power_data, theta):
        val = log_posterior(get_model("power"), PriorSpec("uniform"), LikelihoodSpec("binomial"), power_data, theta)
        assert val == -math.inf

    def test_missing_sigma(self):
        with pytest.raises(InputError):
            log_posterior(get_model("linear"), PriorSpec(), LikelihoodSpec("normal"), Dataset([0.0], [1.0]), [0.0, 1.0])

    def test_batched_matches_scalar(self, power_data):
        other = simulate_dataset("linear", stream(99, 1, 0))
        post = Posterior(get_model("power"), PriorSpec("functional-uniform", ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), [power_data, other])
        P = np.array([[0.2, 0.5, 0.7], [0.1, 0.6, 2.0]])
        batch = post.logpdf(P)
        assert batch[0] == pytest.approx(post.subset(0).logpdf(P[0])[0], abs=1e-12)
        assert batch[1] == pytest.approx(post.subset(1).logpdf(P[1])[0], abs=1e-12)
        assert post.logpdf_one(P[1], 1) == pytest.approx(batch[1], abs=1e-12)

    def test_tabulated_prior_matches_direct(self, power_data):
        m = get_model("power")
        post = Posterior(m, PriorSpec("functional-uniform", ParamBox.interval(0.05, 20)), LikelihoodSpec("binomial"),
                         power_data)
        t = np.geomspace(0.05, 20, 60)
        tab = post._prior_fn(t[:, None])
        direct = np.array([functional_uniform_logdensity(m, [v]) for v in t])
        assert np.ptp(tab - direct) < 1e-6

    def test_jeffreys_binomial_finite(self, power_data):
        post = Posterior(get_model("power"), PriorSpec("jeffreys", ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), power_data)
        assert np.isfinite(post.logpdf([0.2, 0.5, 0.8])[0])


class TestMetropolis:
    def test_flat_prior_recovery(self):
        m = get_model("exponential")
        post = Posterior(m, PriorSpec("uniform", ParamBox.interval(0.0, 1.0)), LikelihoodSpec("normal", sigma=1.0),
                         Dataset.empty())
        s = sample_posterior_mh(post, n_draws=10_000, rng_seed=4)
        assert stats.kstest(s.draws[:, 0], "uniform").statistic < 0.02
        assert np.all(s.log_weights == 0)

    def test_linear_mean_is_ols(self):
        data = linear_normal_data()
        post = Posterior(get_model("linear"), PriorSpec("uniform"), LikelihoodSpec("normal"), data)
        s = sample_posterior_mh(post, rng_seed=1)
        beta = ols(data)
        for j in range(2):
            se = median_mcse(s.draws[:, j]) * 1.2533  # mean and median MCSE are of the same order
            assert abs(s.draws[:, j].mean() - beta[j]) < 3 * max(se, 1e-4)

    def test_acceptance_in_band(self, power_data):
        post = Posterior(get_model("power"), PriorSpec("functional-uniform", ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), power_data)
        s = sample_posterior_mh(post, rng_seed=2)
        assert 0.2 <= s.diagnostics["acceptance_rate"] <= 0.4
        assert s.diagnostics["n_burnin"] == 1000 and s.diagnostics["thinning"] == 2
        assert np.all(np.isfinite(post.logpdf(s.draws)))

    def test_deterministic(self, power_data):
        post = Posterior(get_model("power"), PriorSpec("uniform", ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), power_data)
        a = sample_posterior_mh(post, n_draws=500, n_burnin=200, rng_seed=5)
        b = sample_posterior_mh(post, n_draws=500, n_burnin=200, rng_seed=5)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_batch_independent_of_companions(self, power_data):
        other = simulate_dataset("power2", stream(1, 0, 0))
        spec, lik, m = PriorSpec("uniform", ParamBox.interval(0.05, 20)), LikelihoodSpec("binomial"), get_model("power")
        start = np.array([[0.2, 0.5, 0.7]])
        alone, *_ = run_mh_batch(Posterior(m, spec, lik, power_data), start, [stream(3, 0)], 300, 200)
        both = Posterior(m, spec, lik, [power_data, other])
        pair, *_ = run_mh_batch(both, np.vstack([start, [[0.2, 0.6, 3.0]]]), [stream(3, 0), stream(3, 1)], 300, 200)
        np.testing.assert_array_equal(alone[0], pair[0])

    def test_no_interior_start(self):
        m = get_model("power")
        post = Posterior(m, PriorSpec(lambda t: np.full(len(t), -np.inf), ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), Dataset([0.5], n=[2], s=[1]))
        with pytest.raises(NumericalError):
            sample_posterior_mh(post, n_draws=10)

    def test_detailed_balance_antisymmetry(self, power_data):
        post = Posterior(get_model("power"), PriorSpec("functional-uniform", ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), power_data)
        s = sample_posterior_mh(post, n_draws=100, n_burnin=100, rng_seed=8, record=100)
        checked = 0
        for cur, prop, log_ratio in s.diagnostics["records"]:
            if not math.isfinite(log_ratio):
                continue
            reverse = post.logpdf(cur)[0] - post.logpdf(prop)[0]
            assert abs(log_ratio + reverse) <= 1e-12
            checked += 1
        assert checked > 50


class TestPriorScaling:
    @pytest.mark.parametrize("shift", [math.log(1e-6), math.log(7.0), 250.0])
    def test_mh_bitwise(self, power_data, shift):
        m = get_model("power")
        fu = Posterior(m, PriorSpec("functional-uniform", ParamBox.interval(0.05, 20)), LikelihoodSpec("binomial"),
                       power_data)
        base = fu._prior_fn
        scaled = Posterior(m, PriorSpec(lambda t: base(t) + shift, ParamBox.interval(0.05, 20)),
                           LikelihoodSpec("binomial"), power_data)
        start = np.array([0.2, 0.5, 0.7])
        a = sample_posterior_mh(fu, n_draws=2000, rng_seed=3, start=start)
        b = sample_posterior_mh(scaled, n_draws=2000, rng_seed=3, start=start)
        np.testing.assert_array_equal(a.draws, b.draws)
        band_a = predictive_band(a, m, GRID9)
        band_b = predictive_band(b, m, GRID9)
        np.testing.assert_array_equal(np.array(band_a), np.array(band_b))


class TestImportanceSampling:
    def test_normal_target_ess(self):
        data = linear_normal_data(seed=2)
        post = Posterior(get_model("linear"), PriorSpec("uniform"), LikelihoodSpec("normal", sigma=0.5), data)
        s = sample_posterior_isr(post, n_proposal=20_000, n_resample=5_000, rng_seed=1)
        assert s.diagnostics["ess_fraction"] >= 0.5
        np.testing.assert_allclose(np.median(s.draws, axis=0), ols(data), atol=0.05)

    def test_constant_response_finite(self):
        x = np.linspace(0, 1, 10)
        post = Posterior(get_model("linear"), PriorSpec("uniform"), LikelihoodSpec("normal"), Dataset(x, np.full(10, 0.3)))
        s = sample_posterior_isr(post, n_proposal=2000, n_resample=500, rng_seed=0, mode=[0.3, 0.0, 0.05])
        assert np.all(np.isfinite(s.log_weights))
        assert s.diagnostics.get("effective_sample_size", 1.0) > 0

    def test_agrees_with_mh(self):
        rng = np.random.default_rng(21)
        x = np.repeat([0.0, 1.0, 2.0, 3.0, 4.0], 20)
        y = 0.2 + 0.6 * x / (x + 0.5) + 0.5 * rng.standard_normal(x.size)
        m = get_model("emax")
        post = Posterior(m, PriorSpec("functional-uniform"), LikelihoodSpec("normal"), Dataset(x, y))
        mh = sample_posterior_mh(post, rng_seed=1)
        isr = sample_posterior_isr(post, n_proposal=40_000, n_resample=10_000, rng_seed=1)
        grid = np.linspace(0, 4, 9)
        mu_mh = m.mu(grid, mh.draws[:, :3])
        mu_is = m.mu(grid, isr.draws[:, :3])
        for g in range(grid.size):
            se = math.hypot(median_mcse(mu_mh[:, g]),
                            median_mcse(mu_is[:, g], "iid", isr.diagnostics["effective_sample_size"]))
            assert abs(np.median(mu_mh[:, g]) - np.median(mu_is[:, g])) < 3 * se

    def test_deterministic(self):
        data = linear_normal_data(seed=4)
        post = Posterior(get_model("linear"), PriorSpec("uniform"), LikelihoodSpec("normal"), data)
        a = sample_posterior_isr(post, n_proposal=2000, n_resample=500, rng_seed=7)
        b = sample_posterior_isr(post, n_proposal=2000, n_resample=500, rng_seed=7)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_boundary_mode(self):
        # flat prior on a box with no data: the mode sits anywhere, the logistic coordinates still work
        m = get_model("exponential")
        post = Posterior(m, PriorSpec("uniform", ParamBox.interval(0.0, 1.0)), LikelihoodSpec("normal", sigma=1.0),
                         Dataset.empty())
        s = sample_posterior_isr(post, n_resample=5000, rng_seed=0, mode=[1.0])
        assert "fallback" not in s.diagnostics
        assert stats.kstest(s.draws[:, 0], "uniform").statistic < 0.03

    def test_fallback_on_bad_hessian(self):
        # no data leaves the affine parameters of the emax model with a flat, unbounded posterior
        post = Posterior(get_model("emax"), PriorSpec("uniform"), LikelihoodSpec("normal", sigma=1.0),
                         Dataset.empty())
        with pytest.warns(RuntimeWarning, match="negative definite"):
            s = sample_posterior_isr(post, n_resample=200, rng_seed=0, mode=[0.5, 0.5, 1.0])
        assert s.diagnostics["fallback"] == "mh"


class TestMode:
    def test_uniform_mode_is_mle(self, power_data):
        m = get_model("power")
        post = Posterior(m, PriorSpec("uniform", ParamBox.interval(0.05, 20)), LikelihoodSpec("binomial"), power_data)
        mode = posterior_mode(post, rng_seed=0)
        x, n, s = power_data.x, power_data.n, power_data.s

        # oracle: grid over theta2, constrained concave fit of (theta0, theta1)
        def profile(t2):
            g = x ** t2

            def nll(ab):
                p = np.clip(ab[0] + ab[1] * g, 1e-300, 1 - 1e-16)
                return -np.sum(s * np.log(p) + (n - s) * np.log1p(-p))

            cons = [{"type": "ineq", "fun": lambda ab: 1 - ab[0] - ab[1]}]
            r = optimize.minimize(nll, [0.3, 0.3], method="SLSQP", bounds=[(0, 1), (0, 1)], constraints=cons,
                                  options={"ftol": 1e-14, "maxiter": 500})
            return r.fun, r.x

        grid = np.geomspace(0.05, 20, 400)
        vals = [profile(t)[0] for t in grid]
        i = int(np.argmin(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        t2 = optimize.minimize_scalar(lambda t: profile(t)[0], bounds=(lo, hi), method="bounded",
                                      options={"xatol": 1e-10}).x
        oracle = np.array([*profile(t2)[1], t2])
        np.testing.assert_allclose(mode, oracle, atol=1e-4)

    def test_linear_mode_is_ols(self):
        data = linear_normal_data(seed=3)
        post = Posterior(get_model("linear"), PriorSpec("uniform"), LikelihoodSpec("normal", sigma=0.5), data)
        np.testing.assert_allclose(posterior_mode(post, rng_seed=1), ols(data), atol=1e-6)

    def test_data_free_mode_is_prior_mode(self):
        m = get_model("emax")
        post = Posterior(get_model("exponential"), PriorSpec("functional-uniform", ParamBox.interval(0.2, 3.0)),
                         LikelihoodSpec("normal", sigma=1.0), Dataset.empty())
        grid = np.linspace(0.2, 3.0, 20_001)
        oracle = grid[np.argmax(post.logpdf(grid[:, None]))]
        assert posterior_mode(post, rng_seed=0)[0] == pytest.approx(oracle, abs=1e-4)
        assert m.model_id == "emax"

    def test_all_starts_fail(self):
        post = Posterior(get_model("power"), PriorSpec(lambda t: np.full(len(t), -np.inf), ParamBox.interval(0.05, 20)),
                         LikelihoodSpec("binomial"), Dataset([0.5], n=[2], s=[1]))
        with pytest.raises(NumericalError, match="20 starts"):
            posterior_mode(post, nl_prior=uniform_prior(ParamBox.interval(0.05, 20)))


class TestPredictiveBand:
    def test_single_draw(self):
        m = get_model("linear")
        s = PosteriorSample(np.array([[0.1, 0.5]]), np.zeros(1))
        lo, med, hi = predictive_band(s, m, GRID9)
        np.testing.assert_array_equal(lo, med)
        np.testing.assert_array_equal(med, hi)

    def test_level_zero(self):
        m = get_model("linear")
        s = PosteriorSample(np.random.default_rng(0).normal(size=(101, 2)), np.zeros(101))
        lo, med, hi = predictive_band(s, m, GRID9, level=0.0)
        np.testing.assert_allclose(lo, med)
        np.testing.assert_allclose(hi, med)

    def test_prior_only_matches_direct_transform(self):
        m = get_model("linear", bounds=[[0, 1], [0, 1]])
        post = Posterior(m, PriorSpec("uniform"), LikelihoodSpec("normal", sigma=1.0), Dataset.empty())
        s = sample_posterior_mh(post, n_draws=10_000, rng_seed=6)
        lo, med, hi = predictive_band(s, m, [0.5], level=0.9)
        # theta0 + theta1/2 with both U(0,1): triangular-like sum, quantiles by direct simulation
        ref = np.random.default_rng(0).random((400_000, 2)) @ np.array([1.0, 0.5])
        np.testing.assert_allclose([lo[0], med[0], hi[0]], np.quantile(ref, [0.05, 0.5, 0.95]), atol=0.02)

    def test_weighted_reduces_to_plain(self):
        m = get_model("linear")
        draws = np.random.default_rng(1).normal(size=(400, 2))
        plain = predictive_band(PosteriorSample(draws, np.zeros(400)), m, GRID9)
        lw = np.zeros(400)
        lw[0] = 1e-300  # forces the weighted path with equal weights
        weighted = predictive_band(PosteriorSample(draws, lw), m, GRID9)
        np.testing.assert_allclose(np.array(weighted), np.array(plain), atol=1e-12)

    def test_empty(self):
        with pytest.raises(InputError):
            predictive_band(PosteriorSample(np.empty((0, 2)), np.empty(0)), get_model("linear"), GRID9)


class TestScenario:
    def test_truths(self):
        assert scenario_truth("linear")(0.5) == pytest.approx(0.5)
        assert scenario_truth("emax")(1.0) == pytest.approx(0.2 + 0.6 / 1.05)
        with pytest.raises(InputError):
            scenario_truth("sigmoid")

    def test_single_rep_deterministic(self):
        a = evaluate_scenario("linear", "uniform", n_reps=1, rng_seed=4, n_draws=1000, n_burnin=200)
        b = evaluate_scenario("linear", "uniform", n_reps=1, rng_seed=4, n_draws=1000, n_burnin=200)
        assert a.row() == b.row()
        assert 0 <= a.cp <= 1 and a.ile >= 0 and a.mae1 >= 0

    def test_chunking_does_not_matter(self):
        kw = dict(n_reps=3, rng_seed=2, n_draws=500, n_burnin=200)
        a = evaluate_scenario("power2", "jeffreys", chunk=1, **kw)
        b = evaluate_scenario("power2", "jeffreys", chunk=3, **kw)
        assert a.row() == b.row()

    def test_bad_prior_kind(self):
        with pytest.raises(InputError):
            evaluate_scenario("linear", "flat", n_reps=1)


class TestCoverage:
    def test_linear_band_coverage(self):
        m = get_model("linear")
        x = np.linspace(0, 1, 20)
        hits = 0
        for r in range(500):
            rng = stream(31, r)
            data = Dataset(x, 1.0 + 2.0 * x + 0.5 * rng.standard_normal(x.size))
            post = Posterior(m, PriorSpec("uniform"), LikelihoodSpec("normal", sigma=0.5), data)
            s = sample_posterior_isr(post, n_proposal=4000, n_resample=2000, rng_seed=r, mode=ols(data))
            lo, _, hi = predictive_band(s, m, [0.3])
            hits += lo[0] <= 1.6 <= hi[0]
        assert 0.87 <= hits / 500 <= 0.93
