import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funiform.design import Design
from funiform.errors import InputError
from funiform.funspace import (
    MODEL_IDS,
    SingularGramWarning,
    WeightingMeasure,
    closed_form_prior,
    embedded_jacobian,
    fd_jacobian,
    functional_uniform_logdensity,
    get_model,
    gram_matrix,
    jeffreys_logdensity,
    load_model,
    model_mu,
)
from funiform.metric_core import ParamBox

# Simpson rule, 2e6 panels, of x^2/(x+1)^4 on [0, 4]
EMAX_GRAM_AT_1 = 0.17066666666666663
# 0.5 log sum_i 0.2 (x_i^t log x_i)^2 over doses {0, .05, .2, .6, 1}
POWER_JEFFREYS = {0.4: -0.5379036642239192, 1.0: -1.5618122328542274, 4.0: -3.518992485346458}
DOSES = [0.0, 0.05, 0.2, 0.6, 1.0]


class TestModelMu:
    @pytest.mark.parametrize(
        "model_id, x, theta, expected",
        [
            ("emax", 1.0, (0.0, 1.0, 1.0), 0.5),
            ("exponential", 3.7, (0.0,), 1.0),
            ("power", 1.0, (0.2, 0.6, 1.0), 0.8),
            ("linear", 0.5, (1.0, 2.0), 2.0),
        ],
    )
    def test_values(self, model_id, x, theta, expected):
        assert model_mu(get_model(model_id), x, theta) == pytest.approx(expected, rel=1e-14)

    def test_power_domain_error(self):
        with pytest.raises(InputError):
            model_mu(get_model("power"), 0.0, (0.2, 0.6, -1.0))

    def test_outside_region(self):
        with pytest.raises(InputError):
            model_mu(get_model("emax"), 5.0, (0.0, 1.0, 1.0))

    def test_batched_broadcast(self):
        m = get_model("emax")
        theta = np.array([[0.0, 1.0, 1.0], [1.0, 2.0, 0.5]])
        out = m.mu(np.array([0.0, 1.0, 2.0]), theta)
        assert out.shape == (2, 3)
        assert out[1, 1] == pytest.approx(1.0 + 2.0 / 1.5)


class TestJacobian:
    @pytest.mark.parametrize(
        "model_id, x, theta, expected",
        [("exponential", 0.0, 2.0, 0.0), ("emax", 4.0, 0.004, -4.0 / 4.004 ** 2), ("power", 1.0, 3.0, 0.0)],
    )
    def test_values(self, model_id, x, theta, expected):
        assert embedded_jacobian(get_model(model_id), x, [theta])[0] == pytest.approx(expected, abs=1e-15)

    def test_emax_zero_limit(self):
        m = get_model("emax", bounds=(0.0, 6.0))
        assert embedded_jacobian(m, 4.0, [0.0])[0] == pytest.approx(-0.25, rel=1e-14)

    def test_out_of_box(self):
        with pytest.raises(InputError):
            embedded_jacobian(get_model("emax"), 1.0, [7.0])

    @pytest.mark.parametrize("model_id", ["exponential", "emax", "power"])
    def test_matches_finite_differences_on_grid(self, model_id):
        m = get_model(model_id)
        lo, hi = m.design_region
        xs = np.linspace(lo, hi, 20)[1:]
        for t in np.linspace(m.param_box.lower[0] + 0.05, m.param_box.upper[0] - 0.05, 20):
            an = m.embedded_jac(xs, [t])[:, 0]
            fd = fd_jacobian(m.embed, xs, np.array([t]))[:, 0]
            scale = np.maximum(np.abs(an), 1e-8)
            assert np.all(np.abs(an - fd) / scale < 1e-5)

    @settings(max_examples=50, deadline=None)
    @given(x=st.floats(0.01, 4.0), t=st.floats(0.01, 6.0))
    def test_emax_full_jacobian_fd(self, x, t):
        m = get_model("emax")
        theta = np.array([0.3, 0.7, t])
        full = np.ravel(m.full_jac(np.array([x]), theta))
        h = 1e-6 * (1 + np.abs(theta))
        fd = [(m.mu(np.array([x]), theta + h[i] * np.eye(3)[i]) - m.mu(np.array([x]), theta - h[i] * np.eye(3)[i]))[0]
              / (2 * h[i]) for i in range(3)]
        np.testing.assert_allclose(full, fd, rtol=1e-5, atol=1e-10)


class TestGram:
    def test_exponential_at_zero(self):
        assert gram_matrix(get_model("exponential"), [0.0]).matrix[0, 0] == pytest.approx(1000 / 3, rel=1e-12)

    def test_emax_oracle(self):
        assert gram_matrix(get_model("emax"), [1.0]).matrix[0, 0] == pytest.approx(EMAX_GRAM_AT_1, rel=1e-9)

    def test_single_atom(self):
        m = get_model("emax")
        G = gram_matrix(m, [0.5], WeightingMeasure.discrete([2.0]))
        assert G.matrix[0, 0] == pytest.approx((2.0 / 2.5 ** 2) ** 2, rel=1e-14)

    def test_linear_two_by_two(self):
        G = gram_matrix(get_model("linear"), [0.3, -1.0])
        np.testing.assert_allclose(G.matrix, [[1.0, 0.5], [0.5, 1.0 / 3.0]], rtol=1e-9)
        np.testing.assert_array_equal(G.matrix, G.matrix.T)

    def test_discrete_refinement_converges(self):
        m = get_model("exponential")
        n = 10_000
        x = (np.arange(n) + 0.5) / n * 10.0
        disc = gram_matrix(m, [0.7], WeightingMeasure.discrete(x)).matrix[0, 0] * 10.0
        assert disc == pytest.approx(gram_matrix(m, [0.7]).matrix[0, 0], rel=1e-4)

    def test_weights_validated(self):
        with pytest.raises(InputError):
            WeightingMeasure.discrete([0.0, 1.0], [0.5, 0.6])
        with pytest.raises(InputError):
            gram_matrix(get_model("power"), [1.0], WeightingMeasure.discrete([2.0]))


class TestFunctionalUniform:
    def test_linear_is_constant(self):
        m = get_model("linear")
        vals = [functional_uniform_logdensity(m, t) for t in m.param_box.sample(np.random.default_rng(0), 25)]
        assert max(vals) - min(vals) <= 1e-10

    @pytest.mark.parametrize("model_id, reference", [("exponential", True), ("emax", True), ("power", False)])
    def test_proportional_to_closed_form(self, model_id, reference):
        m = get_model(model_id)
        lo, hi = m.param_box.lower[0], m.param_box.upper[0]
        ts = np.linspace(max(lo, 1e-3), hi, 25)
        ratio = [functional_uniform_logdensity(m, [t]) - math.log(closed_form_prior(model_id, t, reference)) for t in ts]
        assert np.ptp(ratio) < 1e-8

    def test_singular_gram_sentinel(self):
        m = get_model("exponential")
        with pytest.warns(SingularGramWarning):
            assert functional_uniform_logdensity(m, [1.0], WeightingMeasure.discrete([0.0])) == -math.inf


class TestClosedForm:
    def test_emax_value(self):
        assert closed_form_prior("emax", 1.0) == pytest.approx(1 / math.sqrt(125), rel=1e-14)

    def test_power_reference_value(self):
        assert closed_form_prior("power", 1.0) == pytest.approx(math.sqrt(6 / 19), rel=1e-14)

    def test_exponential_limit(self):
        assert closed_form_prior("exponential", 0.0) == pytest.approx(math.sqrt(8000 / 6), rel=1e-14)
        # the guard branch joins the direct formula continuously
        below, above = closed_form_prior("exponential", [0.00099999, 0.00100001])
        assert below == pytest.approx(above, rel=1e-5)

    def test_unknown_model(self):
        with pytest.raises(InputError):
            closed_form_prior("linear", 1.0)


class TestJeffreys:
    def test_single_atom_exponential(self):
        d = Design((2.0,), (1.0,))
        for t in (0.0, 0.5, 3.0):
            assert jeffreys_logdensity(get_model("exponential"), [t], d) == pytest.approx(math.log(2.0) - 2.0 * t, abs=1e-13)

    def test_linear_constant(self):
        d = Design((0.0, 1.0), (0.5, 0.5))
        m = get_model("linear")
        vals = [jeffreys_logdensity(m, [a, b], d) for a, b in [(0, 0), (1, -2), (-3, 4)]]
        assert np.ptp(vals) == 0.0

    @pytest.mark.parametrize("t", sorted(POWER_JEFFREYS))
    def test_power_five_dose_oracle(self, t):
        d = Design(tuple(DOSES), (0.2,) * 5)
        assert jeffreys_logdensity(get_model("power"), [t], d) == pytest.approx(POWER_JEFFREYS[t], abs=1e-12)

    def test_difference_from_weighted_fu_is_constant(self):
        d = Design(tuple(DOSES), (0.2,) * 5)
        m = get_model("power")
        w = WeightingMeasure.from_design(d)
        diffs = [jeffreys_logdensity(m, [t], d) - functional_uniform_logdensity(m, [t], w) for t in np.linspace(0.05, 20, 100)]
        assert np.ptp(diffs) <= 1e-10


class TestRegistry:
    def test_ids(self):
        assert set(MODEL_IDS) == {"exponential", "emax", "power", "linear"}

    def test_unknown(self):
        with pytest.raises(InputError):
            get_model("sigmoid")

    def test_load_json(self, tmp_path):
        doc = '{"model_id": "emax", "x_range": [0, 2], "bounds": [0.01, 3]}'
        m = load_model(doc)
        assert m.design_region == (0.0, 2.0)
        assert m.param_box == ParamBox.interval(0.01, 3.0)
        path = tmp_path / "m.json"
        path.write_text(doc)
        assert load_model(str(path)).design_region == (0.0, 2.0)

    def test_load_json_missing_id(self):
        with pytest.raises(InputError):
            load_model({"x_range": [0, 1]})
