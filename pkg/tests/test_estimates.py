import math

import pytest
from hypothesis import given, settings, strategies as st

from qsflow.estimates import (
    NormSequence,
    ScaleParams,
    chronological_bound,
    chronological_radius,
    chronological_ratio,
    integrability_radius,
    scale_ratio,
    series_bound,
    sum_series,
)


def direct_sum(c: NormSequence, ratio: float, n_terms: int = 50) -> float:
    return math.fsum(ratio**n * c(n) for n in range(n_terms))


def rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(b))


class TestNormSequence:
    def test_values(self):
        assert NormSequence.geometric(0.5, 2.0)(3) == 0.25
        assert NormSequence.factorial(2.0)(3) == pytest.approx(8 / 6, rel=1e-15)
        assert NormSequence.from_table([1, 2])(5) == 0.0

    @pytest.mark.parametrize("kwargs", [{"kind": "poisson"}, {"kind": "geometric", "q": -1.0}, {"kind": "table", "table": (1.0, -2.0)}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            NormSequence(**kwargs)

    def test_log_space_term(self):
        c = NormSequence.factorial(3.0)
        assert c.term(400, 2.0) == pytest.approx(math.exp(400 * math.log(6.0) - math.lgamma(401)), rel=1e-12)

    def test_scale_params(self):
        with pytest.raises(ValueError):
            ScaleParams(0.0, 1.0)
        with pytest.raises(ValueError):
            ScaleParams(1.0, 1.0, t=-0.1)


class TestSeriesBound:
    @pytest.mark.parametrize("q,t,xi,zeta", [(0.3, 0.0, 2.0, 2.0), (0.2, 0.5, 3.0, 1.5), (0.05, 2.0, 1.0, 4.0)])
    def test_geometric_closed_form(self, q, t, xi, zeta):
        r = scale_ratio(t, xi, zeta)
        res = series_bound(NormSequence.geometric(q), ScaleParams(xi, zeta, t))
        assert res.convergent
        assert rel(res.value, 1.0 / (1.0 - r * q)) <= 1e-12

    def test_t_zero(self):
        xi, zeta = 2.0, 3.0
        res = series_bound(NormSequence.geometric(1.0), ScaleParams(xi, zeta, 0.0))
        assert rel(res.value, 1.0 / (1.0 - (xi * zeta) ** -0.5)) <= 1e-12

    def test_divergent(self):
        res = series_bound(NormSequence.geometric(1.0), ScaleParams(0.5, 0.5, 0.0))
        assert not res.convergent and math.isinf(res.tail_bound)
        assert not series_bound(NormSequence.geometric(2.0), ScaleParams(1.0, 1.0, 0.0)).convergent

    def test_ratio_one_diverges(self):
        assert not sum_series(NormSequence.geometric(1.0), 1.0).convergent

    def test_table_is_exact(self):
        c = NormSequence.from_table([1.0, 2.0, 3.0])
        res = sum_series(c, 2.0)
        assert res.convergent and res.value == 1 + 4 + 12 and res.tail_bound == 0.0

    def test_factorial_is_exponential(self):
        res = sum_series(NormSequence.factorial(1.5, 2.0), 2.0)
        assert rel(res.value, 2.0 * math.exp(3.0)) <= 1e-12

    def test_overflow_is_divergent(self):
        assert not sum_series(NormSequence.geometric(1e200), 1e200).convergent

    @settings(max_examples=60)
    @given(
        st.sampled_from(["geometric", "factorial"]),
        st.floats(0.01, 0.5),
        st.floats(0.1, 3.0),
        st.floats(0.0, 1.0),
    )
    def test_agrees_with_direct_sum(self, kind, q, c0, ratio):
        c = NormSequence(kind, c0, q)
        res = sum_series(c, ratio)
        assert res.convergent
        assert rel(res.value, direct_sum(c, ratio)) <= 1e-12

    @settings(max_examples=60)
    @given(st.floats(0.5, 4.0), st.floats(0.5, 4.0), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_monotone_in_t(self, xi, zeta, t1, dt):
        c = NormSequence.factorial(0.7)
        a = series_bound(c, ScaleParams(xi, zeta, t1)).value
        b = series_bound(c, ScaleParams(xi, zeta, t1 + dt)).value
        assert b >= a * (1 - 1e-14)

    @settings(max_examples=60)
    @given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=12), st.lists(st.floats(0.0, 1.0), min_size=12, max_size=12))
    def test_monotone_in_c(self, base, extra):
        c = NormSequence.from_table(base)
        bigger = NormSequence.from_table([x + e for x, e in zip(base, extra)])
        params = ScaleParams(1.0, 1.0, 0.3)
        assert series_bound(bigger, params).value >= series_bound(c, params).value


class TestIntegrabilityRadius:
    def test_boundary(self):
        rho = 2.0
        assert integrability_radius(0.5, 0.5, rho) == 0.0
        assert integrability_radius(0.1, 0.1, rho) == 0.0

    @pytest.mark.parametrize("xi,rho", [(1.0, 4.0), (2.5, 1.3), (0.3, 10.0)])
    def test_equal_scales(self, xi, rho):
        expected = (math.sqrt(xi * rho) - 1.0) ** 2 / xi
        assert rel(integrability_radius(xi, xi, rho), expected) <= 1e-12

    @settings(max_examples=100)
    @given(st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
    def test_plug_back(self, xi, zeta, rho):
        t = integrability_radius(xi, zeta, rho)
        if math.sqrt(xi * zeta) * rho <= 1.0:
            assert t == 0.0
            return
        sx, sz = math.sqrt(xi), math.sqrt(zeta)
        rhs = math.sqrt(xi * zeta * rho + 0.25 * (sx - sz) ** 2) - 0.5 * (sx + sz)
        assert abs(math.sqrt(xi * zeta * t) - rhs) <= 1e-10 * max(1.0, rhs)
        assert abs(scale_ratio(t, xi, zeta) - rho) <= 1e-10 * rho

    def test_increasing_in_rho(self):
        radii = [integrability_radius(1.0, 1.0, rho) for rho in (2, 5, 20, 100, 1000)]
        assert all(b > a for a, b in zip(radii, radii[1:]))
        assert rel(radii[-1], (math.sqrt(1000) - 1) ** 2) <= 1e-12

    def test_series_converges_inside(self):
        xi, zeta, rho = 2.0, 0.7, 3.0
        t = integrability_radius(xi, zeta, rho)
        c = NormSequence.geometric(0.9 / rho)
        assert series_bound(c, ScaleParams(xi, zeta, 0.9 * t)).convergent


class TestChronological:
    def test_geometric_closed_form(self):
        zeta, t, q = 4.0, 0.04, 0.9
        r = chronological_ratio(t, zeta)
        res = chronological_bound(NormSequence.geometric(q), zeta, t)
        assert rel(res.value, 1.0 / (1.0 - r * q)) <= 1e-12

    def test_large_zeta_tends_to_c0(self):
        c = NormSequence.geometric(0.5, c0=3.0)
        res = chronological_bound(c, 1e16, 0.0)
        assert abs(res.value - 3.0) <= 1e-7

    @pytest.mark.parametrize("rho,zeta", [(3.0, 1.0), (2.0, 4.0), (10.0, 0.25)])
    def test_radius(self, rho, zeta):
        c = NormSequence.geometric(1.0 / rho)
        t_max = chronological_radius(c, zeta)
        assert rel(t_max, (rho - zeta**-0.5) ** 2) <= 1e-12
        assert chronological_bound(c, zeta, 0.9 * t_max).convergent
        assert not chronological_bound(c, zeta, 1.1 * t_max).convergent

    def test_radius_edge_cases(self):
        assert chronological_radius(NormSequence.factorial(2.0), 1.0) == math.inf
        assert chronological_radius(NormSequence.geometric(1.0), 0.5) == 0.0

    def test_agrees_with_direct_sum(self):
        c = NormSequence.factorial(2.0)
        res = chronological_bound(c, 2.0, 0.3)
        assert rel(res.value, direct_sum(c, chronological_ratio(0.3, 2.0))) <= 1e-12
