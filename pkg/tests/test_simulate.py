import math

import numpy as np
import pytest

from qprop import gauss_kernel as gk
from qprop import meanfield as mf
from qprop import simulate as sim
from qprop.activations import SteSurrogate, make_constant_spaced, make_sign
from qprop.errors import DomainError, EstimationError, ResourceError

SIGN = make_sign()
UNIT = mf.HyperParams.from_std(1.0, 0.0)


def spec(width=50, depth=3, hp=UNIT, act=SIGN, seed=0, input_dim=None):
    return sim.NetworkSpec(width if input_dim is None else input_dim, width, depth, hp, act, seed)


class TestStreams:
    def test_deterministic(self):
        a = sim.stream(7, 2, sim.WEIGHTS).standard_normal(5)
        b = sim.stream(7, 2, sim.WEIGHTS).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_kinds_and_layers_differ(self):
        base = sim.stream(7, 2, sim.WEIGHTS).standard_normal(5)
        assert not np.array_equal(base, sim.stream(7, 2, sim.BIASES).standard_normal(5))
        assert not np.array_equal(base, sim.stream(7, 3, sim.WEIGHTS).standard_normal(5))


class TestNetwork:
    def test_weights_reproducible(self):
        w1 = sim.build_network(spec(seed=3)).weight(2)
        w2 = sim.build_network(spec(seed=3)).weight(2)
        np.testing.assert_array_equal(w1, w2)

    def test_weight_variance(self):
        hp = mf.HyperParams.from_std(1.7, 0.2)
        w = sim.build_network(spec(width=1000, hp=hp)).weight(1)
        assert w.var() * 1000 == pytest.approx(1.7**2, rel=0.05)

    def test_zero_bias_exact(self):
        np.testing.assert_array_equal(sim.build_network(spec()).bias(1), np.zeros(50))

    def test_materialized_matches_lazy(self):
        s = spec(hp=mf.HyperParams.from_std(1.2, 0.3))
        lazy, eager = sim.build_network(s), sim.build_network(s, materialize=True)
        for layer in (1, 2, 3):
            np.testing.assert_array_equal(lazy.weight(layer), eager.weight(layer))
            np.testing.assert_array_equal(lazy.bias(layer), eager.bias(layer))

    def test_memory_budget(self):
        s = spec()
        with pytest.raises(ResourceError):
            sim.build_network(s, materialize=True, memory_budget=s.parameter_bytes() - 1)

    def test_input_shape_checked(self):
        net = sim.build_network(spec())
        with pytest.raises(DomainError):
            next(net.preactivations(np.zeros((3, 2))))

    @pytest.mark.parametrize("kw", [{"width": 0}, {"depth": 0}, {"input_dim": 1}, {"seed": -1}])
    def test_invalid_spec(self, kw):
        with pytest.raises(DomainError):
            spec(**kw)


class TestManifold:
    def test_geometry(self):
        x = sim.manifold_inputs(64, sim.ManifoldSpec(12, 0.7, seed=2))
        assert x.shape == (64, 12)
        np.testing.assert_allclose((x**2).mean(axis=0), 0.49, rtol=1e-12)
        cos = x.T @ x / (64 * 0.49)
        theta = 2 * np.pi * np.arange(12) / 12
        np.testing.assert_allclose(cos, np.cos(theta[None, :] - theta[:, None]), atol=1e-12)

    def test_fold_bands_circulant(self):
        r = 10
        idx = np.arange(r)
        corr = np.cos(2 * np.pi * (idx[None, :] - idx[:, None]) / r)
        np.testing.assert_allclose(sim.fold_bands(corr), np.cos(2 * np.pi * np.arange(r // 2 + 1) / r), atol=1e-14)

    def test_duplicate_input_fully_correlated(self):
        x = sim.manifold_inputs(40, sim.ManifoldSpec(8))
        x = np.concatenate([x[:, :1]] * 8, axis=1)
        for stats in sim.forward_collect(sim.build_network(spec(width=40, depth=4)), x):
            np.testing.assert_allclose(stats.c_emp, 1.0, rtol=1e-12)

    def test_layer_one_variance_at_fixed_point(self):
        act = make_constant_spaced(4)
        hp = mf.HyperParams.from_std(1.3, 0.2)
        q_star = mf.solve_q_star(act, hp)[0]
        x = sim.manifold_inputs(2000, sim.ManifoldSpec(16, sim.input_scale(act, hp, q_star)))
        (stats,) = sim.forward_collect(sim.build_network(spec(width=2000, depth=2, hp=hp, act=act)), x, layers=[1])
        assert stats.layer == 1
        assert stats.q_emp == pytest.approx(q_star, rel=0.05)

    def test_theory_first_layer(self):
        act = make_constant_spaced(4)
        hp = mf.HyperParams.from_std(1.3, 0.2)
        q_star = mf.solve_q_star(act, hp)[0]
        delta = np.linspace(0, np.pi, 5)
        curves = sim.theory_curves(act, hp, delta, 3)
        scale2 = sim.input_scale(act, hp, q_star) ** 2
        np.testing.assert_allclose(curves[0], (hp.sigma_w2 * scale2 * np.cos(delta) + hp.sigma_b2) / q_star, rtol=1e-12)
        np.testing.assert_allclose(curves[1], mf.c_map(act, q_star, curves[0], hp), rtol=1e-12)

    def test_small_run_tracks_theory(self):
        run = sim.run_manifold(SIGN, UNIT, width=400, depth=6, num_samples=16, seeds=[0, 1])
        assert run.c_emp.shape == run.c_theory.shape == (6, 9)
        assert run.mae() < 0.03
        assert 0 < run.persistence() <= 1


class TestEstimators:
    def test_empirical_chi_sign(self):
        est = sim.empirical_chi(spec(width=500, depth=10), (0.3, 0.7), n_seeds=4, n_pairs=40)
        assert est.reference == pytest.approx(2 / math.pi, rel=1e-12)
        assert est.value == pytest.approx(est.reference, abs=max(4 * est.stderr, 0.05))

    def test_empirical_chi_needs_offset(self):
        act = make_constant_spaced(4)
        hp = mf.HyperParams.from_std(1.3, 0.2)
        c_star = mf.solve_c_star(act, hp)[0]
        with pytest.raises(EstimationError):
            sim.empirical_chi(spec(hp=hp, act=act), (c_star, c_star), n_seeds=2)

    def test_jacobian_moment_sign(self):
        est = sim.jacobian_moment_mc(spec(width=300, depth=3), SteSurrogate(1.0), n_seeds=4)
        assert est.reference == pytest.approx(math.erf(1 / math.sqrt(2)), rel=1e-12)
        assert est.value == pytest.approx(est.reference, abs=4 * est.stderr)

    def test_jacobian_moment_scales_with_rho_squared(self):
        s = spec(width=100, depth=2)
        one = sim.jacobian_moment_mc(s, SteSurrogate(1.0), n_seeds=2)
        two = sim.jacobian_moment_mc(s, SteSurrogate(2.0), n_seeds=2)
        np.testing.assert_allclose(two.per_seed, 4 * one.per_seed, rtol=1e-13)

    def test_mc_expect_matches_exact(self):
        f = make_constant_spaced(3)
        bspec = gk.BivariateSpec(1.0, 0.5)
        mean, se = sim.mc_expect_2d(f, f, bspec, 10**6, seed=1)
        assert mean == pytest.approx(gk.expect_2d(f, f, bspec), abs=4 * se)

    def test_mc_expect_mixed_pair(self):
        f, g = make_constant_spaced(3), SIGN
        bspec = gk.BivariateSpec(0.8, -0.3, 1.4)
        mean, se = sim.mc_expect_2d(f, g, bspec, 10**6, seed=2, chunk=300_000)
        assert mean == pytest.approx(gk.expect_2d(f, g, bspec), abs=4 * se)

    def test_mc_expect_reproducible(self):
        bspec = gk.BivariateSpec(1.0, 0.2)
        assert sim.mc_expect_2d(SIGN, SIGN, bspec, 5000, seed=4, chunk=1000) == sim.mc_expect_2d(
            SIGN, SIGN, bspec, 5000, seed=4, chunk=1000
        )

    def test_mc_expect_needs_staircases(self):
        with pytest.raises(DomainError):
            sim.mc_expect_2d(np.tanh, SIGN, gk.BivariateSpec(1.0, 0.0), 10)
