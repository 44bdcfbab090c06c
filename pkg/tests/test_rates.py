import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from fracpoisson.rates import (
    HurstVector,
    HypothesisError,
    check_hypothesis,
    check_hypothesis_star,
    convergence_rate_sup,
    exponent_report,
    holder_exponent_sup,
    holder_exponent_uncapped,
    smoothing_parameters,
)

hurst_value = st.floats(min_value=0.5, max_value=0.999, allow_nan=False)


@st.composite
def admissible(draw, k_min=1, k_max=6):
    k = draw(st.integers(k_min, k_max))
    h = draw(st.lists(hurst_value, min_size=k, max_size=k))
    hv = HurstVector(tuple(h))
    if not check_hypothesis(hv):
        # move every component towards 1 until sum(h) > k - 2
        room = sum(1.0 - v for v in h)
        t = min((k - 2 - hv.total) / room + 1e-3, 0.99)
        hv = HurstVector(tuple(v + (1.0 - v) * t for v in h))
    assume(check_hypothesis(hv))
    return hv


class TestHurstVector:
    def test_parse_string(self):
        assert HurstVector.parse("0.6, 0.7").h == (0.6, 0.7)

    def test_parse_broadcast(self):
        assert HurstVector.parse("0.75", k=3).h == (0.75, 0.75, 0.75)

    @pytest.mark.parametrize("bad", ["0.4", "1.0", "0.6,abc", ""])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            HurstVector.parse(bad)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            HurstVector.parse("0.6,0.6", k=3)


class TestHypotheses:
    def test_low_dimension_always_holds(self):
        assert check_hypothesis(HurstVector((0.5,)))
        assert check_hypothesis(HurstVector((0.5, 0.5, 0.5)))

    def test_k4_examples(self):
        assert check_hypothesis(HurstVector((0.6,) * 4))
        assert not check_hypothesis(HurstVector((0.5,) * 4))

    def test_star_examples(self):
        assert check_hypothesis_star(HurstVector((0.9,)))
        assert check_hypothesis_star(HurstVector((0.6, 0.6)))
        assert not check_hypothesis_star(HurstVector((0.5, 0.5, 0.5)))


class TestExponents:
    def test_holder_examples(self):
        assert holder_exponent_sup(HurstVector((0.75,))) == 1.0
        assert holder_exponent_sup(HurstVector((0.5,) * 3)) == pytest.approx(0.5)
        assert holder_exponent_sup(HurstVector((0.8,) * 4)) == 1.0

    def test_holder_gate(self):
        with pytest.raises(HypothesisError, match="hypothesis \\(H\\) fails"):
            holder_exponent_sup(HurstVector((0.5,) * 4))

    @pytest.mark.parametrize("h,expected", [
        ((0.75,), 0.5),
        ((0.6, 0.7), 0.5),
        ((0.6, 0.6, 0.6), 0.25),
        ((0.5, 0.9, 0.7), 0.25),
        ((0.9,) * 5, 0.2),
    ])
    def test_rate_examples(self, h, expected):
        assert convergence_rate_sup(HurstVector(h)) == pytest.approx(expected)

    def test_rate_k4_uses_capped_sum(self):
        # sum(h) = 3.2 is capped at k - 1 = 3
        assert convergence_rate_sup(HurstVector((0.8,) * 4)) == pytest.approx(0.25)

    def test_rate_k4_below_cap(self):
        h = HurstVector((0.7,) * 4)  # sum 2.8 < 3
        assert convergence_rate_sup(h) == pytest.approx(0.8 / 3.6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            convergence_rate_sup(HurstVector((0.6,)), k=2)

    def test_report_on_failure(self):
        rep = exponent_report(HurstVector((0.5,) * 4))
        assert not rep.hypothesis_ok and math.isnan(rep.nu_sup)


class TestSmoothing:
    def test_k4_star(self):
        sp = smoothing_parameters(HurstVector((0.8,) * 4))
        assert sp.delta == pytest.approx(1.0)
        assert sp.mu == pytest.approx(0.49)
        assert sp.gamma_sup == pytest.approx(1.0)
        assert sp.epsilon(16) == pytest.approx(16**-0.49)

    def test_k5_not_star(self):
        sp = smoothing_parameters(HurstVector((0.7,) * 5))
        assert sp.delta == pytest.approx(0.5)

    def test_explicit_delta(self):
        sp = smoothing_parameters(HurstVector((0.8,) * 4), delta=1.0, rho=0.5)
        assert sp.mu == pytest.approx(0.25)

    def test_requires_k4(self):
        with pytest.raises(ValueError, match="smoothed scheme not applicable"):
            smoothing_parameters(HurstVector((0.8,) * 3))

    @pytest.mark.parametrize("kw", [{"delta": 2.5}, {"rho": 1.0}, {"rho": 0.0}])
    def test_bad_parameters(self, kw):
        with pytest.raises(ValueError):
            smoothing_parameters(HurstVector((0.8,) * 4), **kw)


class TestProperties:
    @given(admissible())
    @settings(max_examples=200, deadline=None)
    def test_rate_bounds(self, h):
        nu = convergence_rate_sup(h)
        assert 0.0 < nu <= 0.5
        if h.k >= 4:
            assert nu < 0.5

    @given(admissible(k_min=4))
    @settings(max_examples=200, deadline=None)
    def test_rate_equals_gamma_over_four(self, h):
        sp = smoothing_parameters(h)
        assert convergence_rate_sup(h) == pytest.approx(sp.gamma_sup / 4.0, rel=1e-12)

    @given(admissible(k_min=2), st.integers(0, 5), st.floats(0.0, 0.3))
    @settings(max_examples=200, deadline=None)
    def test_holder_monotone_uncapped(self, h, i, bump):
        i = i % h.k
        arr = list(h.h)
        arr[i] = min(arr[i] + bump, 0.999)
        assert holder_exponent_uncapped(HurstVector(tuple(arr))) >= holder_exponent_uncapped(h)

    @given(admissible(k_min=2))
    @settings(max_examples=200, deadline=None)
    def test_star_gives_unit_holder(self, h):
        if check_hypothesis_star(h):
            assert holder_exponent_sup(h) == 1.0

    @given(admissible(k_min=4))
    @settings(max_examples=100, deadline=None)
    def test_mu_inside_open_interval(self, h):
        sp = smoothing_parameters(h)
        assert 0.0 < sp.mu < (2.0 - sp.delta) / (h.k - 2)
