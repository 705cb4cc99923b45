import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mudicho.errors import ConfigurationError, DomainError, InvalidGrowthRate
from mudicho.growth import (
    BUILTIN_NAMES,
    builtin_rate,
    expression_rate,
    interpolate,
    rate_from_dict,
    verify_ratio_bound,
)


class TestBuiltins:
    def test_polynomial_starts_at_one(self):
        assert builtin_rate("polynomial")(0) == 1.0

    def test_exponential_value(self):
        assert builtin_rate("exponential")(3) == pytest.approx(math.e ** 3, rel=1e-15)

    def test_logarithmic_starts_at_one(self):
        assert builtin_rate("logarithmic")(0) == pytest.approx(1.0, abs=1e-15)

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            builtin_rate("cubic")

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_log_matches_value(self, name):
        rate = builtin_rate(name)
        t = np.linspace(0, 50, 101)
        np.testing.assert_allclose(rate.log(t), np.log(rate(t)), rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_continuous_derivative_matches_difference(self, name):
        rate = builtin_rate(name, "differentiable")
        t = np.linspace(1, 20, 39)
        h = 1e-6
        fd = (rate(t + h) - rate(t - h)) / (2 * h)
        np.testing.assert_allclose(rate.derivative(t), fd, rtol=1e-6)

    def test_discrete_rate_has_no_derivative(self):
        with pytest.raises(ConfigurationError):
            builtin_rate("polynomial").derivative(1.0)

    def test_exponential_flag(self):
        assert builtin_rate("exponential").is_exponential()
        assert not builtin_rate("polynomial").is_exponential()


class TestRatioBound:
    def test_polynomial_attained_at_zero(self):
        check = verify_ratio_bound(builtin_rate("polynomial"), 100)
        assert check.theta_hat == pytest.approx(2.0, abs=1e-15)
        assert check.argmax == 0
        assert check.ok

    def test_exponential_constant_ratio(self):
        check = verify_ratio_bound(builtin_rate("exponential"), 10)
        assert check.theta_hat == pytest.approx(math.e, rel=1e-14)
        assert check.ok

    def test_logarithmic_declared_bound(self):
        check = verify_ratio_bound(builtin_rate("logarithmic"), 10_000)
        assert check.ok
        assert check.theta_hat == pytest.approx(math.log(math.e + 1.0), rel=1e-14)

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_continuous_builtins_respect_theta(self, name):
        assert verify_ratio_bound(builtin_rate(name, "differentiable"), 10_000).ok

    def test_square_plus_one_brute_force(self):
        rate = expression_rate("n^2+1", theta=2.5)
        ratios = [((n + 1) ** 2 + 1) / (n ** 2 + 1) for n in range(50)]
        check = verify_ratio_bound(rate, 50)
        assert check.theta_hat == pytest.approx(max(ratios), rel=1e-14)
        assert check.argmax == int(np.argmax(ratios)) == 1
        assert check.theta_hat == pytest.approx(2.5)

    def test_understated_theta_flagged(self):
        check = verify_ratio_bound(expression_rate("n^2+1", theta=2.0), 50)
        assert not check.ok

    def test_non_monotone_rejected(self):
        with pytest.raises(InvalidGrowthRate):
            verify_ratio_bound(expression_rate("1+n*(2+sin(n))", theta=10.0), 50)

    def test_horizon_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            verify_ratio_bound(builtin_rate("polynomial"), 0)


class TestCustomRates:
    def test_from_dict_expression(self):
        rate = rate_from_dict({"expr": "1+2*n", "theta": 3})
        assert rate(2) == 5.0
        assert rate.theta == 3.0

    def test_from_dict_needs_theta(self):
        with pytest.raises(ConfigurationError):
            rate_from_dict({"expr": "1+n"})

    def test_discrete_needs_unit_start(self):
        with pytest.raises(InvalidGrowthRate):
            expression_rate("2+n", theta=2)

    def test_constants_substituted(self):
        rate = expression_rate("1+k*n", theta=4, constants={"k": 3.0})
        assert rate(1) == 4.0


class TestInterpolant:
    def test_knots_exact(self):
        rate = builtin_rate("logarithmic")
        interp = interpolate(rate)
        n = np.arange(100)
        np.testing.assert_array_equal(interp.forward(n.astype(float)), rate(n))

    def test_affine_between_knots(self):
        interp = interpolate(builtin_rate("exponential"))
        assert interp.forward(2.25) == pytest.approx(math.e ** 2 + 0.25 * (math.e ** 3 - math.e ** 2))

    def test_polynomial_inverse_closed_form(self):
        interp = interpolate(builtin_rate("polynomial"))
        assert interp.inverse(math.e) == pytest.approx(math.e - 1, abs=1e-14)
        s = np.linspace(1, 500, 77)
        np.testing.assert_allclose(interp.inverse(s), s - 1, atol=1e-12)

    def test_exponential_inverse_integers(self):
        interp = interpolate(builtin_rate("exponential"))
        n = np.arange(30)
        np.testing.assert_allclose(interp.inverse(np.exp(n.astype(float))), n, atol=1e-12)

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_inverse_of_one_is_zero(self, name):
        assert interpolate(builtin_rate(name)).inverse(1.0) == 0.0

    def test_below_domain(self):
        interp = interpolate(builtin_rate("polynomial"))
        with pytest.raises(DomainError):
            interp.inverse(0.5)
        with pytest.raises(DomainError):
            interp.forward(-0.1)

    def test_needs_discrete_rate(self):
        with pytest.raises(ConfigurationError):
            interpolate(builtin_rate("polynomial", "differentiable"))

    def test_grows_on_demand(self):
        interp = interpolate(builtin_rate("logarithmic"))
        # ln(e + n) = 8 needs n ≈ e^8, far beyond the initial knot table
        t = interp.inverse(8.0)
        assert interp.forward(t) == pytest.approx(8.0, rel=1e-12)

    @pytest.mark.parametrize("name", BUILTIN_NAMES)
    def test_unit_step_ratio_below_theta_squared(self, name):
        rate = builtin_rate(name)
        interp = interpolate(rate)
        t = np.linspace(0, 300, 3001)
        assert np.all(interp.forward(t + 1) / interp.forward(t) <= rate.theta ** 2 * (1 + 1e-12))


@given(
    name=st.sampled_from(BUILTIN_NAMES),
    u=st.floats(min_value=0.0, max_value=1.0),
)
def test_interpolant_round_trip(name, u):
    rate = builtin_rate(name)
    interp = interpolate(rate)
    top = float(rate(200.0))
    s = 1.0 + u * (top - 1.0)
    assert abs(interp.forward(interp.inverse(s)) - s) <= 1e-10 * s


@given(
    name=st.sampled_from(BUILTIN_NAMES),
    u=st.floats(min_value=0.0, max_value=1.0),
    v=st.floats(min_value=0.0, max_value=1.0),
)
def test_inverse_monotone(name, u, v):
    rate = builtin_rate(name)
    interp = interpolate(rate)
    top = float(rate(1e4))
    lo, hi = sorted((1.0 + u * (top - 1.0), 1.0 + v * (top - 1.0)))
    if hi > lo:
        assert interp.inverse(hi) > interp.inverse(lo)


def test_inverse_strictly_increasing_on_grid():
    interp = interpolate(builtin_rate("logarithmic"))
    s = np.linspace(1.0, 6.0, 1000)
    assert np.all(np.diff(interp.inverse(s)) > 0)


def test_discretized_continuous_rate():
    rate = builtin_rate("polynomial", "differentiable")
    seq = rate.discretized(1.0)
    assert seq.kind == "discrete"
    assert seq(0.0) == 1.0
    # (1 + (1 + i)) / 2
    np.testing.assert_allclose(seq(np.arange(5.0)), (2 + np.arange(5.0)) / 2)
    np.testing.assert_allclose(seq.log(np.arange(5.0)), np.log((2 + np.arange(5.0)) / 2), atol=1e-15)
