import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from qprop import calibrate as cal
from qprop import meanfield as mf
from qprop.activations import make_constant_spaced
from qprop.errors import DomainError, FitError

TWO_OVER_PI = 2.0 / math.pi


def brute_chi_constant(n, d):
    """chi at C = 0 for evenly spaced offsets d * k, vectorized over d."""
    k = np.arange(1, n) - n / 2.0
    g = d[:, None] * k[None, :]
    num = np.exp(-0.5 * g * g).sum(axis=1) ** 2 / (2 * np.pi)
    up = ndtr(-g)
    var = (ndtr(-np.maximum(g[:, :, None], g[:, None, :])) - up[:, :, None] * up[:, None, :]).sum(axis=(1, 2))
    return num / var


class TestGoldenMax:
    def test_parabola(self):
        x, fx = cal.golden_max(lambda x: -((x - 0.3) ** 2), -1.0, 2.0, 1e-9)
        assert x == pytest.approx(0.3, abs=1e-8)
        assert fx == pytest.approx(0.0, abs=1e-15)


class TestOptimizeSpacing:
    def test_two_states_degenerate(self):
        curve = cal.optimize_spacing(2)
        assert curve.degenerate
        assert curve.chi_max == pytest.approx(TWO_OVER_PI, abs=1e-15)
        assert curve.d_tilde_opt == curve.d_tilde[curve.d_tilde.size // 2]

    def test_more_states_propagate_better(self):
        assert cal.optimize_spacing(16).chi_max > cal.optimize_spacing(8).chi_max

    @pytest.mark.parametrize("n", [4, 8])
    def test_against_brute_grid(self, n):
        curve = cal.optimize_spacing(n)
        d = np.linspace(0.5 * curve.d_tilde_opt, 1.5 * curve.d_tilde_opt, 1_000_000 // (n * n) * 16)
        chis = brute_chi_constant(n, d)
        assert curve.d_tilde_opt == pytest.approx(d[np.argmax(chis)], abs=1e-4)
        assert curve.chi_max == pytest.approx(chis.max(), abs=1e-10)

    def test_frozen_optimum(self):
        curve = cal.optimize_spacing(4)
        assert curve.d_tilde_opt == pytest.approx(0.99569, abs=2e-5)
        assert curve.chi_max == pytest.approx(0.881154, abs=1e-6)

    def test_curve_samples_consistent(self):
        curve = cal.optimize_spacing(6, coarse_points=30)
        d, c = zip(*curve.samples)
        np.testing.assert_allclose(c, [mf.chi_constant_spaced(6, x) for x in d], rtol=1e-15)

    def test_large_state_count_starts_low(self):
        curve = cal.optimize_spacing(5000, coarse_points=40)
        assert 0 < curve.d_tilde_opt < 1e-2
        assert curve.chi_max > 0.9999

    @pytest.mark.parametrize("n,rng", [(1, None), (4, (0.0, 1.0)), (4, (2.0, 1.0))])
    def test_invalid(self, n, rng):
        with pytest.raises(DomainError):
            cal.optimize_spacing(n, d_range=rng)


class TestPowerLaw:
    def test_exact_round_trip(self):
        ns = np.array([2, 4, 8, 16, 32, 64], dtype=float)
        chi = 1 - np.exp(0.71) * (ns + 1) ** -1.82
        fit = cal.fit_power_law(np.column_stack([ns, chi]))
        assert fit.exponent == pytest.approx(-1.82, abs=1e-10)
        assert fit.log_intercept == pytest.approx(0.71, abs=1e-10)
        assert fit.residual < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(p=st.floats(-3.0, -0.5), b=st.floats(-1.0, 1.0))
    def test_recovers_any_law(self, p, b):
        ns = np.array([4.0, 8.0, 16.0, 32.0, 64.0])
        y = np.exp(b) * (ns + 1) ** p
        fit = cal.fit_power_law(np.column_stack([ns, 1 - y]))
        assert fit.exponent == pytest.approx(p, abs=1e-8)
        assert fit.log_intercept == pytest.approx(b, abs=1e-8)

    @pytest.mark.parametrize(
        "points",
        [[(2, 0.5), (4, 0.8)], [(4, 0.8), (4, 0.8), (4, 0.8)], [(2, 0.5), (4, 1.0), (8, 0.9)], [(2, 0.5), (4, -0.1), (8, 0.9)]],
    )
    def test_errors(self, points):
        with pytest.raises(FitError):
            cal.fit_power_law(points)

    def test_reproducible_subset_matches_reported_law(self):
        curves = cal.chi_max_sweep((4, 8, 16, 32, 64))
        fit = cal.fit_power_law([(c.n_states, c.chi_max) for c in curves])
        assert fit.exponent == pytest.approx(-1.82, abs=0.05)
        assert fit.log_intercept == pytest.approx(0.71, abs=0.10)

    def test_to_dict_keys(self):
        assert set(cal.REFERENCE_FIT.to_dict()) == {"exponent", "intercept", "residual"}


class TestPredictedDepthScale:
    def test_three_states(self):
        exact, approx = cal.predicted_depth_scale(3)
        assert approx == pytest.approx(6.1291479113151475, rel=1e-12)
        assert 6 * approx == pytest.approx(37, abs=1)
        assert exact < approx

    def test_ratio_tends_to_one(self):
        ratios = [np.divide(*cal.predicted_depth_scale(n)) for n in (10, 100, 1000, 10**5)]
        assert abs(ratios[-1] - 1) < 1e-7
        assert np.all(np.diff(np.abs(np.array(ratios) - 1)) < 0)

    def test_ten_states(self):
        x = math.exp(0.71) * 11**-1.82
        assert cal.predicted_depth_scale(10)[0] == pytest.approx(-1 / math.log(1 - x), rel=1e-14)

    def test_outside_domain(self):
        with pytest.raises(DomainError):
            cal.predicted_depth_scale(1, cal.PowerLawFit(-1.0, 2.0, 0.0))


class TestSteAndXavier:
    def test_rho_value(self):
        assert cal.ste_rho(1.0, 1.0) == pytest.approx(1.21028706243252227870, rel=1e-14)

    def test_rho_small_variance(self):
        assert cal.ste_rho(1.7, 1e-6) == pytest.approx(1 / 1.7, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(sw=st.floats(0.1, 5.0), q=st.floats(1e-3, 20.0))
    def test_moment_is_one(self, sw, q):
        assert cal.jacobian_moment(sw, cal.ste_rho(sw, q), q) == pytest.approx(1.0, rel=1e-13)

    def test_xavier_three_states(self):
        assert cal.xavier_factor(3) == pytest.approx(1.1201171875, rel=1e-15)
        assert cal.xavier_std(3, 784, 2048) == pytest.approx(1.1201171875 * math.sqrt(2 / (784 + 2048)), rel=1e-15)

    def test_xavier_limit(self):
        assert cal.xavier_factor(10**6) == pytest.approx(1.0, abs=1e-9)

    def test_refit_tracks_critical_sigma(self):
        a, s = cal.refit_xavier_factor(range(3, 40))
        for n in (3, 10, 39):
            assert 1 + a / (n + s) ** 2 == pytest.approx(cal.init_params(n).sigma_w, rel=5e-3)


class TestInitParams:
    @pytest.mark.parametrize("n", [3, 10, 16])
    def test_round_trip(self, n):
        rec = cal.init_params(n)
        d = 2.0 / (n - 1)
        act = make_constant_spaced(n)
        p = mf.HyperParams.from_std(rec.sigma_w, rec.sigma_b)
        q, _ = mf.solve_q_star(act, p)
        assert q == pytest.approx(rec.q_star, rel=1e-10)
        assert d / math.sqrt(q) == pytest.approx(rec.d_tilde_opt, rel=1e-9)

    def test_reaches_maximal_slope(self):
        rec = cal.init_params(10)
        curve = cal.optimize_spacing(10)
        r = mf.analyze(make_constant_spaced(10), mf.HyperParams.from_std(rec.sigma_w))
        assert r.chi == pytest.approx(curve.chi_max, abs=1e-10)

    def test_frozen_values(self):
        rec = cal.init_params(10)
        assert rec.sigma_w == pytest.approx(1.01310, abs=1e-5)
        assert rec.rho == pytest.approx(1.000782, abs=1e-6)
        assert rec.sigma_b == 0.0

    def test_rejects_one_state(self):
        with pytest.raises(DomainError):
            cal.init_params(1)


class TestGrids:
    def test_depthscale_single_cell(self):
        g = cal.grid_depthscale(4, (1.5, 1.5), (0.1, 0.1), 1)
        act = make_constant_spaced(4).scaled_offsets(1.5)  # spacing 1
        expected = mf.depth_scale(mf.approx_chi_star(act, mf.HyperParams.from_std(1.5, 0.1)).chi)
        assert g.values.shape == (1, 1)
        assert g.values[0, 0] == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("sw,sb", [(1.2, 0.1), (2.0, 0.3), (3.0, 0.5)])
    def test_depthscale_spot_cells_vs_exact(self, sw, sb):
        g = cal.grid_depthscale(4, None, None, None, values=([sw], [sb]))
        act = make_constant_spaced(4).scaled_offsets(1.5)
        exact = mf.analyze(act, mf.HyperParams.from_std(sw, sb)).xi
        assert g.values[0, 0] == pytest.approx(exact, rel=0.05)

    def test_depthscale_best_at_zero_bias(self):
        g = cal.grid_depthscale(4, (0.5, 3.0), (0.0, 1.0), 6)
        assert np.all(np.argmax(g.values, axis=1) == 0)

    def test_linear_grid_matches_constant_row(self):
        n = 6
        d0 = np.array([0.2, 0.4])
        g = cal.grid_linear_spacing(n, None, None, None, values=(d0, [0.0, 0.3]))
        for i, d in enumerate(d0):
            assert g.values[i, 0] == pytest.approx(mf.depth_scale(mf.chi_constant_spaced(n, d)), rel=1e-13)

    def test_linear_grid_marks_invalid(self):
        g = cal.grid_linear_spacing(6, None, None, None, values=([0.5], [-0.9, 0.0]))
        assert math.isnan(g.values[0, 0])
        assert np.isfinite(g.values[0, 1])

    def test_cq_single_point(self):
        (row,) = cal.grid_cq_comparison(4, 0.0, [1.0])
        sw, chi_c, chi_q = row
        assert sw == 1.0 and chi_c > 0 and chi_q > 0

    def test_cq_ordering(self):
        rows = cal.grid_cq_comparison(10, 0.0, np.geomspace(0.3, 30, 15))
        assert all(c >= q for _, c, q in rows)
        assert rows[-1][2] / rows[-1][1] < 0.1

    def test_cq_offsets(self):
        np.testing.assert_allclose(cal.cq_offsets(4, 0.0), make_constant_spaced(4).offsets)
