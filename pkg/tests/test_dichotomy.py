import numpy as np
import pytest

from helpers import constant_diagonal, continuous_system
from mudicho.dichotomy import (
    analytic_projections,
    candidate_ranks,
    certify,
    certify_continuous,
    estimate_projections,
    fit_certificate,
    pair_indices,
    pair_set,
)
from mudicho.errors import ConfigurationError, GapNotResolved, WindowError
from mudicho.evolution import Flow, LinearCocycle
from mudicho.growth import builtin_rate
from mudicho.sysdef.spec import NoDichotomyWarning

EXP = builtin_rate("exponential")


@pytest.fixture(scope="module")
def cert42(lin42_512, ex42):
    return certify(lin42_512, ex42.rate)


class TestPairs:
    def test_endpoints_included(self):
        idx = pair_indices(500)
        assert idx[0] == 0 and idx[-1] == 500
        assert np.all(np.diff(idx) > 0)

    def test_pairs_ordered(self):
        n, m = pair_set(100)
        assert np.all(m >= n)
        assert np.any(m == n)

    def test_empty_window(self):
        with pytest.raises(WindowError):
            pair_indices(0)


class TestExample42:
    def test_strong_with_unit_constants(self, cert42):
        assert cert42.verdict == "strong_dichotomy"
        assert cert42.K == pytest.approx(1.0, abs=1e-9)
        assert cert42.lam == pytest.approx(1.0, abs=1e-9)
        assert cert42.a == pytest.approx(1.0, abs=1e-9)
        assert cert42.rank == 1

    def test_estimated_projection_is_coordinate_split(self, cert42):
        P = cert42.projections.matrices(np.arange(0, 513, 64))
        np.testing.assert_allclose(P, np.broadcast_to(np.diag([1.0, 0.0]), P.shape), atol=1e-10)

    def test_bounds_hold_on_every_sample(self, cert42):
        assert cert42.max_violation() <= 1e-9
        assert cert42.residual_commute <= 1e-12

    def test_declared_projection_gives_same_constants(self, lin42_512, ex42, cert42):
        cert = certify(lin42_512, ex42.rate, projections=analytic_projections(ex42, 512))
        assert (cert.K, cert.lam, cert.a) == pytest.approx((cert42.K, cert42.lam, cert42.a), abs=1e-9)

    def test_exponential_rate_sees_no_dichotomy(self, lin42_512):
        # the decay is polynomial, so in the exponential scale the rate vanishes
        assert certify(lin42_512, EXP).verdict == "none"

    def test_pair_density_stable(self, lin42_512, ex42, cert42):
        denser = certify(lin42_512, ex42.rate, density=80)
        assert denser.lam == pytest.approx(cert42.lam, rel=0.02)
        assert denser.a == pytest.approx(cert42.a, rel=0.02)

    def test_report_dict(self, cert42):
        doc = cert42.to_dict(include_samples=True)
        assert doc["verdict"] == "strong_dichotomy"
        assert len(doc["samples"]["n"]) == doc["fit"]["pair_count"]
        assert set(doc["samples"]) >= {"n", "m", "x", "y1", "y2", "y3", "y4"}


class TestConstantSystems:
    def test_scalar_contraction(self):
        cert = certify(constant_diagonal([-np.log(2)], 64), EXP)
        assert cert.verdict == "strong_dichotomy"
        assert cert.rank == 1
        np.testing.assert_allclose(cert.projections.matrices([0, 30]), np.ones((2, 1, 1)))
        assert cert.lam == pytest.approx(np.log(2), abs=1e-6)

    def test_three_rates(self):
        cert = certify(constant_diagonal([-1.0, -0.1, 1.0], 128), EXP)
        assert cert.verdict == "strong_dichotomy"
        assert cert.rank == 2
        assert cert.lam == pytest.approx(0.1, abs=1e-6)
        assert cert.a == pytest.approx(1.0, abs=1e-6)

    def test_expanding_scalar_has_rank_zero(self):
        cert = certify(constant_diagonal([0.5], 64), EXP)
        assert cert.rank == 0
        assert cert.lam == pytest.approx(0.5, abs=1e-6)

    def test_neutral_scalar_has_none(self):
        cert = certify(constant_diagonal([0.0], 64), EXP)
        assert cert is None or cert.verdict == "none"

    def test_cut_moves_the_split(self):
        lin = constant_diagonal([-1.0, 1.0], 64)
        assert estimate_projections(lin, EXP, cut=0.0).rank == 1
        assert estimate_projections(lin, EXP, cut=1.5).rank == 2
        assert estimate_projections(lin, EXP, cut=-1.5).rank == 0


def conjugated_constant(exponents, window, seed=0):
    """S diag(e^{c_i}) S^{-1} repeated, with its exact invariant splitting."""
    d = len(exponents)
    S = np.eye(d) + 0.5 * np.random.default_rng(seed).normal(size=(d, d))
    A = S @ np.diag(np.exp(exponents)) @ np.linalg.inv(S)
    return LinearCocycle(np.broadcast_to(A, (window, d, d))), S


class TestNonNormal:
    @pytest.mark.parametrize("window", [64, 256])
    def test_projection_is_the_eigen_splitting(self, window):
        lin, S = conjugated_constant([-1.0, 0.5, 1.0], window)
        cert = certify(lin, EXP)
        assert cert.verdict == "strong_dichotomy" and cert.rank == 1
        P = cert.projections.matrices()[20:window - 20]
        # a finite window fixes the splitting only away from its ends: the
        # unstable kernel depends on the past and the stable range on the future,
        # both attracted to the eigenspaces at rate e^{-1.5 distance}
        expected = S @ np.diag([1.0, 0.0, 0.0]) @ np.linalg.inv(S)
        np.testing.assert_allclose(P, np.broadcast_to(expected, P.shape), atol=1e-9)
        assert cert.residual_commute <= 1e-12
        assert "projection_not_idempotent" not in cert.flags

    def test_rates(self):
        lin, _ = conjugated_constant([-1.0, 0.5, 1.0], 256)
        cert = certify(lin, EXP)
        # decay is set by the slower side (0.5) and growth by the fastest exponent
        assert cert.lam == pytest.approx(0.5, abs=0.05)
        assert cert.a == pytest.approx(1.0, abs=0.05)
        assert cert.max_violation() <= 1e-9

    def test_widely_spread_exponents_stay_finite(self):
        lin, S = conjugated_constant([-3.0, -2.0, 2.5], 300, seed=3)
        cert = certify(lin, EXP)
        assert cert.rank == 2 and cert.is_strong
        expected = S @ np.diag([1.0, 1.0, 0.0]) @ np.linalg.inv(S)
        np.testing.assert_allclose(cert.projections(150), expected, atol=1e-9)
        Pm = cert.projections.matrices()
        assert np.max(np.abs(Pm @ Pm - Pm)) < 1e-9
        assert np.all(np.isfinite(cert.samples["y1"][cert.samples["x"] > 0]))


class TestEstimationErrors:
    def test_gap_not_resolved(self):
        with pytest.raises(GapNotResolved) as info:
            estimate_projections(constant_diagonal([0.0, 0.01], 64), EXP, cut=0.005)
        assert info.value.witness["ratio"] < 10

    def test_short_window(self):
        with pytest.raises(WindowError):
            certify(constant_diagonal([-1.0], 16), EXP)

    def test_window_beyond_cocycle(self):
        with pytest.raises(WindowError):
            fit_certificate(constant_diagonal([-1.0], 40), EXP,
                            estimate_projections(constant_diagonal([-1.0], 40), EXP, 0.0), window=80)


def test_candidate_ranks_order():
    log_s = np.array([-10.0, -5.0, 5.0, 10.0])
    ranks = [r for r, _ in candidate_ranks(log_s, 0.0)]
    assert ranks[0] == 2
    assert sorted(ranks) == [0, 1, 2, 3, 4]
    assert [r for r, _ in candidate_ranks(np.array([-0.1, 0.1]), 0.0)] == [0, 2]


class TestContinuous:
    def test_example_flow(self, ex55):
        cert = certify_continuous(Flow(ex55, step=1e-2), ex55.rate, window=128)
        assert cert.verdict == "strong_dichotomy"
        assert cert.rank == 1
        assert cert.continuous["K_cont"] >= 1.0
        assert np.isfinite(cert.continuous["K_cont"])

    def test_inverse_time_decay(self):
        # x' = -x/t decays like s/t, which is rate 1 against μ(t) = 1 + t for large t
        spec = continuous_system([["-1/t"]], rate={"builtin": "polynomial"})
        cert = certify_continuous(Flow(spec, step=1e-2), spec.rate, window=256)
        assert cert.verdict == "strong_dichotomy"
        assert cert.lam == pytest.approx(1.0, abs=0.1)

    def test_zero_matrix(self):
        with pytest.warns(NoDichotomyWarning):
            spec = continuous_system([["0"]], rate={"builtin": "polynomial"})
        cert = certify_continuous(Flow(spec, step=1e-2), spec.rate, window=64)
        assert cert is None or cert.verdict == "none"

    def test_needs_differentiable_rate(self, ex55):
        with pytest.raises(ConfigurationError):
            certify_continuous(Flow(ex55), builtin_rate("polynomial"))
