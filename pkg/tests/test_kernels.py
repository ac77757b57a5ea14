from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modrenew.kernels import (
    INTERIOR,
    LEFT,
    RIGHT,
    KernelDomainError,
    KernelSpec,
    _central,
    _left,
    _right,
    classify_region,
    kernel_constant,
    kernel_l2,
    kernel_moment,
    kernel_pq,
    kernel_weight,
    kernel_weights,
    region_l2,
)

GRID = np.round(np.arange(1, 11) / 10, 10)


def riemann(fn, lo, hi, m=1_000_000):
    # midpoint rule, an independent check on the Gauss-Legendre values
    h = (hi - lo) / m
    u = lo + h * (np.arange(m) + 0.5)
    return float(np.sum(fn(u)) * h)


class TestKernelSpec:
    def test_rejects_unsupported_mu(self):
        with pytest.raises(ValueError, match="mu"):
            KernelSpec(4, 0.1, 1.0)

    @pytest.mark.parametrize("a", [0.0, -0.1, 0.5, 0.7])
    def test_rejects_bad_bandwidth(self, a):
        with pytest.raises(ValueError, match="bandwidth"):
            KernelSpec(1, a, 1.0)

    def test_constant(self):
        assert kernel_constant(1) == 6.0  # 2 * 3 * binom(1, 1)
        assert kernel_constant(2) == 30.0  # 2 * 5 * binom(3, 2)
        assert kernel_constant(3) == 140.0  # 2 * 7 * binom(5, 3)


class TestClassifyRegion:
    spec = KernelSpec(2, 0.1, 1.0)

    def test_interior(self):
        reg = classify_region(0.5, self.spec)
        assert (reg.tag, reg.p, reg.q) == (INTERIOR, 1.0, 1.0)

    def test_left(self):
        reg = classify_region(0.05, self.spec)
        assert reg.tag == LEFT and reg.p == 1.0 and reg.q == pytest.approx(0.5)

    def test_right(self):
        reg = classify_region(0.95, self.spec)
        assert reg.tag == RIGHT and reg.q == 1.0 and reg.p == pytest.approx(0.5)

    def test_ties_resolve_to_boundary_regions(self):
        assert classify_region(0.1, self.spec).tag == LEFT
        assert classify_region(0.9, self.spec).tag == RIGHT
        assert classify_region(0.1, self.spec).q == 1.0

    @pytest.mark.parametrize("x", [-0.01, 1.01])
    def test_outside_domain(self, x):
        with pytest.raises(KernelDomainError):
            classify_region(x, self.spec)

    @pytest.mark.parametrize("x", [0.0, 1.0])
    def test_endpoints_are_degenerate(self, x):
        with pytest.raises(KernelDomainError, match="degenerate"):
            classify_region(x, self.spec)


class TestKernelValues:
    def test_epanechnikov_peak(self):
        assert kernel_pq(0.0, 1, 1, 1) == pytest.approx(0.75, abs=1e-15)

    def test_biweight_peak(self):
        assert kernel_pq(0.0, 1, 1, 2) == pytest.approx(0.9375, abs=1e-15)

    def test_left_boundary_hand_value(self):
        # C=6, (p+q)^-4 = (2/3)^4, (p+r)=1.5, bracket=2*0.5*(0.5-0.5)+0.25+0.5
        assert kernel_pq(0.5, 1, 0.5, 1) == pytest.approx(4 / 3, abs=1e-14)

    def test_zero_outside_support(self):
        assert kernel_pq(1.01, 1, 1, 2) == 0.0
        assert kernel_pq(-1.01, 1, 0.4, 2) == 0.0
        assert kernel_pq(0.41, 1, 0.4, 2) == 0.0

    def test_boundary_kernels_can_be_negative(self):
        r = np.linspace(-1, 0.2, 501)
        assert kernel_pq(r, 1, 0.2, 2).min() < 0

    @pytest.mark.parametrize("mu", [1, 2, 3])
    def test_boundary_formulas_reduce_to_central(self, mu):
        r = np.linspace(-1, 1, 1001)
        central = _central(r, mu)
        np.testing.assert_allclose(_left(r, 1.0, 1.0, mu), central, rtol=0, atol=1e-12)
        np.testing.assert_allclose(_right(r, 1.0, 1.0, mu), central, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("mu", [1, 2, 3])
    def test_central_is_even(self, mu):
        r = np.linspace(0, 1, 501)
        np.testing.assert_allclose(kernel_pq(r, 1, 1, mu), kernel_pq(-r, 1, 1, mu), rtol=0, atol=1e-12)

    def test_right_is_mirror_of_left(self):
        r = np.linspace(-1, 1, 401)
        for p in (0.2, 0.55, 0.9):
            np.testing.assert_allclose(
                kernel_pq(r, p, 1.0, 2, side=RIGHT), kernel_pq(-r, 1.0, p, 2, side=LEFT), atol=1e-12
            )


class TestMoments:
    @pytest.mark.parametrize("mu", [1, 2, 3])
    @pytest.mark.parametrize("side", [LEFT, RIGHT])
    def test_unit_mass_and_zero_mean_on_grid(self, mu, side):
        for p in GRID:
            for q in GRID:
                assert abs(kernel_moment(p, q, mu, 0, side) - 1.0) < 1e-9
                assert abs(kernel_moment(p, q, mu, 1, side)) < 1e-9

    def test_spec_examples(self):
        assert kernel_moment(1, 1, 2, 0) == pytest.approx(1.0, abs=1e-12)
        assert kernel_moment(1, 0.5, 1, 1) == pytest.approx(0.0, abs=1e-12)
        assert kernel_moment(1, 1, 1, 2) == pytest.approx(0.2, abs=1e-12)

    def test_moment_order_limited(self):
        with pytest.raises(ValueError):
            kernel_moment(1, 1, 1, 3)

    def test_l2_values(self):
        assert kernel_l2(1, 1, 1) == pytest.approx(0.6, abs=1e-12)
        assert kernel_l2(1, 1, 2) == pytest.approx(5 / 7, abs=1e-12)

    def test_l2_against_riemann_sum(self):
        ref = riemann(lambda u: kernel_pq(u, 1, 1, 1) ** 2, -1, 1)
        assert kernel_l2(1, 1, 1) == pytest.approx(ref, abs=1e-9)

    def test_boundary_l2_against_riemann_sum(self):
        ref = riemann(lambda u: kernel_pq(u, 1, 0.3, 2) ** 2, -1, 0.3)
        assert kernel_l2(1, 0.3, 2) == pytest.approx(ref, abs=1e-8)

    def test_boundary_l2_exceeds_interior(self):
        assert kernel_l2(1, 0.3, 2) > kernel_l2(1, 1, 2)


class TestKernelWeight:
    spec1 = KernelSpec(1, 0.1, 1.0)

    def test_interior_peak(self):
        assert kernel_weight(0.5, 0.5, self.spec1) == pytest.approx(0.75)

    def test_outside_window(self):
        assert kernel_weight(0.5, 0.7, self.spec1) == 0.0

    def test_left_at_origin(self):
        # x = a/2: q = 0.5 and r = (x - w)/a = 0.5 at w = 0
        assert kernel_weight(0.05, 0.0, self.spec1) == pytest.approx(4 / 3, abs=1e-12)

    def test_rejects_marks_outside_domain(self):
        with pytest.raises(KernelDomainError):
            kernel_weight(0.5, 1.2, self.spec1)
        with pytest.raises(KernelDomainError):
            kernel_weights(1.0, 0.5, self.spec1)

    @pytest.mark.parametrize("mu", [1, 2, 3])
    @pytest.mark.parametrize("x", [0.013, 0.05, 0.1, 0.37, 0.5, 0.9, 0.95, 0.999])
    def test_integrates_to_bandwidth(self, mu, x):
        spec = KernelSpec(mu, 0.1, 1.0)
        reg = classify_region(x, spec)
        lo, hi = x - reg.q * spec.bandwidth, x + reg.p * spec.bandwidth
        nodes, weights = np.polynomial.legendre.leggauss(2 * mu + 4)
        w = lo + (hi - lo) * (nodes + 1) / 2
        integral = (hi - lo) / 2 * np.sum(weights * kernel_weights(x, w, spec))
        assert abs(integral - spec.bandwidth) < 1e-9 * spec.bandwidth

    def test_support_stays_inside_domain(self):
        spec = KernelSpec(2, 0.1, 1.0)
        w = np.linspace(0, 1, 2001)
        for x in (0.02, 0.98):
            k = kernel_weights(x, w, spec)
            inside = np.abs(w - x) <= spec.bandwidth
            assert np.all(k[~inside] == 0)

    def test_region_l2_varies_with_region(self):
        spec = KernelSpec(1, 0.1, 1.0)
        assert region_l2(0.5, spec) == pytest.approx(0.6)
        assert region_l2(0.03, spec) == pytest.approx(kernel_l2(1, 0.3, 1, LEFT))
        assert region_l2(0.97, spec) == pytest.approx(kernel_l2(0.3, 1, 1, RIGHT))


@settings(max_examples=200, deadline=None)
@given(
    p=st.floats(0.05, 1.0),
    q=st.floats(0.05, 1.0),
    mu=st.sampled_from([1, 2, 3]),
)
def test_moment_conditions_hold_for_any_support(p, q, mu):
    assert abs(kernel_moment(p, q, mu, 0, LEFT) - 1) < 1e-9
    assert abs(kernel_moment(p, q, mu, 1, LEFT)) < 1e-9
    assert abs(kernel_moment(p, q, mu, 0, RIGHT) - 1) < 1e-9


@settings(max_examples=100, deadline=None)
@given(x=st.floats(1e-6, 1 - 1e-6), w=st.floats(0.0, 1.0))
def test_vector_and_scalar_weights_agree(x, w):
    spec = KernelSpec(2, 0.15, 1.0)
    # 0-d and 1-d evaluations may take different SIMD paths in numpy
    assert kernel_weight(x, w, spec) == pytest.approx(kernel_weights(np.array([x]), np.array([w]), spec)[0],
                                                      rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("x, a", [(0.7, 0.3), (0.3, 0.3), (0.9, 0.1)])
def test_region_edge_with_rounding_stays_in_domain(x, a):
    spec = KernelSpec(2, a, 1.0)
    reg = classify_region(x, spec)
    assert 0.0 < reg.p <= 1.0 and 0.0 < reg.q <= 1.0
    assert region_l2(x, spec) == pytest.approx(5 / 7, rel=1e-12)
