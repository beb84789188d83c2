"""Tests for the reference estimators (Kalman/RTS, UKF/URTSS, BPF, grid)."""

import numpy as np
import pytest

from varsmooth.baselines import (
    GridDensity,
    bootstrap_pf,
    grid_filter,
    grid_smooth,
    kalman_filter,
    rts_smooth,
    ukf_filter,
    urtss_smooth,
)
from varsmooth.exceptions import EvaluationError, GridRangeError
from varsmooth.models import GaussianPrior, make_growth_model, make_linear_model, simulate
from varsmooth.models import Dataset


def random_walk_model(q=1.0, r=1.0, prior_var=1.0):
    return make_linear_model(
        A=[[1.0]], C=[[1.0]], Q=[[q]], R=[[r]],
        prior=GaussianPrior.from_cov([0.0], [[prior_var]]),
    )


def random_linear_model(rng, n_x, n_y=1):
    a = rng.normal(size=(n_x, n_x))
    a *= 0.9 / max(1.0, np.max(np.abs(np.linalg.eigvals(a))))
    c = rng.normal(size=(n_y, n_x))
    q_half = rng.normal(size=(n_x, n_x)) * 0.4
    r_half = rng.normal(size=(n_y, n_y)) * 0.4
    return make_linear_model(
        A=a, C=c, Q=q_half @ q_half.T + 0.2 * np.eye(n_x),
        R=r_half @ r_half.T + 0.2 * np.eye(n_y),
        prior=GaussianPrior.from_cov(rng.normal(size=n_x), np.eye(n_x)),
    )


class TestKalman:
    def test_scalar_update_by_hand(self):
        # predict: var 1+1=2; gain 2/3; mean 2/3; var 2 - 4/3 = 2/3
        model = random_walk_model()
        data = Dataset(T=1, ys=np.array([[1.0]]))
        res = kalman_filter(model, data)
        assert res.means[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert res.covs[0, 0, 0] == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_tiny_measurement_noise_tracks_measurement(self):
        model = random_walk_model(r=1e-12)
        data = Dataset(T=1, ys=np.array([[1.0]]))
        res = kalman_filter(model, data)
        assert res.means[0, 0] == pytest.approx(1.0, abs=1e-9)

    def test_loglik_matches_grid_evidence(self):
        model = random_walk_model(q=0.8, r=0.5)
        data = simulate(model, T=10, seed=3)
        kf = kalman_filter(model, data)
        grid = grid_filter(model, data, lo=-15.0, hi=15.0, n=4000)
        assert grid.loglik == pytest.approx(kf.loglik, abs=1e-4)

    def test_smoother_variance_not_larger_on_average(self):
        model = random_walk_model()
        data = simulate(model, T=30, seed=1)
        kf = kalman_filter(model, data)
        sm = rts_smooth(model, data, kf)
        assert np.mean(sm.covs[1:, 0, 0]) <= np.mean(kf.covs[:, 0, 0]) + 1e-12


class TestUnscented:
    def test_matches_kalman_on_linear_systems(self):
        rng = np.random.default_rng(0)
        for n_x in (1, 2, 3):
            model = random_linear_model(rng, n_x)
            data = simulate(model, T=12, seed=int(rng.integers(1 << 16)))
            kf = kalman_filter(model, data)
            uf = ukf_filter(model, data)
            np.testing.assert_allclose(uf.means, kf.means, atol=1e-8)
            np.testing.assert_allclose(uf.covs, kf.covs, atol=1e-8)
            assert uf.loglik == pytest.approx(kf.loglik, abs=1e-8)
            ks = rts_smooth(model, data, kf)
            us = urtss_smooth(model, data, filtered=uf)
            np.testing.assert_allclose(us.means, ks.means, atol=1e-8)
            np.testing.assert_allclose(us.covs, ks.covs, atol=1e-8)

    def test_growth_run_is_finite_and_spd(self):
        model = make_growth_model()
        data = simulate(model, T=50, seed=7, x0=[5.0])
        uf = ukf_filter(model, data)
        us = urtss_smooth(model, data, filtered=uf)
        assert np.all(np.isfinite(uf.means)) and np.all(np.isfinite(us.means))
        for cov in us.covs:
            assert np.all(np.linalg.eigvalsh(cov) > 0)


class TestBootstrapPf:
    def test_matches_kalman_within_monte_carlo_error(self):
        model = random_walk_model()
        data = simulate(model, T=20, seed=5)
        kf = kalman_filter(model, data)
        pf = bootstrap_pf(model, data, n_particles=100_000, seed=0)
        # posterior std ~ sqrt(2/3); MC standard error ~ std/sqrt(ESS)
        stderr = np.sqrt(pf.covs[:, 0, 0] / pf.ess)
        assert np.all(np.abs(pf.means[:, 0] - kf.means[:, 0]) < 3.5 * stderr + 1e-3)
        assert pf.loglik == pytest.approx(kf.loglik, abs=0.05)

    def test_reproducible_given_seed(self):
        model = random_walk_model()
        data = simulate(model, T=5, seed=2)
        a = bootstrap_pf(model, data, n_particles=500, seed=11)
        b = bootstrap_pf(model, data, n_particles=500, seed=11)
        np.testing.assert_array_equal(a.means, b.means)
        assert a.loglik == b.loglik

    def test_evidence_variance_shrinks_with_particles(self):
        model = make_growth_model()
        data = simulate(model, T=20, seed=9, x0=[5.0])
        spreads = []
        for n in (1_000, 10_000, 100_000):
            logliks = [bootstrap_pf(model, data, n_particles=n, seed=s).loglik for s in range(6)]
            spreads.append(np.var(logliks))
        assert spreads[2] < spreads[0]

    def test_vanishing_weights_name_the_step(self):
        model = random_walk_model(r=1e-4)
        data = Dataset(T=2, ys=np.array([[0.0], [1e200]]))
        with np.errstate(over="ignore"):
            with pytest.raises(EvaluationError, match="step 2"):
                bootstrap_pf(model, data, n_particles=200, seed=0)


class TestGrid:
    def test_linear_filter_matches_kalman(self):
        model = random_walk_model()
        data = simulate(model, T=10, seed=4)
        kf = kalman_filter(model, data)
        gf = grid_filter(model, data, lo=-15.0, hi=15.0, n=4000)
        for k in range(10):
            assert gf.filtered[k].mean() == pytest.approx(kf.means[k, 0], abs=1e-5)
            assert gf.filtered[k].var() == pytest.approx(kf.covs[k, 0, 0], abs=1e-4)

    def test_linear_smoother_matches_rts(self):
        model = random_walk_model()
        data = simulate(model, T=10, seed=4)
        sm = rts_smooth(model, data)
        gs = grid_smooth(model, data, lo=-15.0, hi=15.0, n=4000)
        for k in range(11):
            assert gs.smoothed[k].mean() == pytest.approx(sm.means[k, 0], abs=1e-5)
            assert gs.smoothed[k].var() == pytest.approx(sm.covs[k, 0, 0], abs=1e-4)

    def test_grid_smoothed_variance_not_larger_on_average(self):
        model = random_walk_model()
        data = simulate(model, T=15, seed=12)
        gf = grid_filter(model, data, lo=-15.0, hi=15.0, n=2000)
        gs = grid_smooth(model, data, lo=-15.0, hi=15.0, n=2000)
        filt_var = np.mean([g.var() for g in gf.filtered])
        smooth_var = np.mean([g.var() for g in gs.smoothed[1:]])
        assert smooth_var <= filt_var + 1e-12

    def test_refinement_self_consistency(self):
        model = make_growth_model()
        data = simulate(model, T=10, seed=6, x0=[5.0])
        coarse = grid_filter(model, data, lo=-40.0, hi=40.0, n=4000)
        fine = grid_filter(model, data, lo=-40.0, hi=40.0, n=8001)
        for k in range(10):
            assert abs(coarse.filtered[k].mean() - fine.filtered[k].mean()) < 1e-6

    def test_all_densities_normalized(self):
        model = make_growth_model()
        data = simulate(model, T=15, seed=8, x0=[5.0])
        gs = grid_smooth(model, data, lo=-40.0, hi=40.0, n=2000)
        for dens in gs.smoothed:
            assert np.trapezoid(dens.density, dx=dens.spacing) == pytest.approx(1.0, abs=1e-9)

    def test_narrow_range_raises(self):
        model = make_growth_model()
        data = simulate(model, T=10, seed=8, x0=[5.0])
        with pytest.raises(GridRangeError):
            grid_filter(model, data, lo=-3.0, hi=3.0, n=500)

    def test_grid_density_validation(self):
        with pytest.raises(Exception):
            GridDensity(lo=0.0, hi=1.0, n=200, log_density=np.zeros(200) + 5.0)
