"""Tests for the state-space model contract and the concrete systems."""

import numpy as np
import pytest
import scipy.special

from varsmooth.exceptions import DomainError, ModelConstructionError
from varsmooth.models import (
    GaussianPrior,
    log_bessel_i0,
    make_growth_model,
    make_illustrative_model,
    make_linear_model,
    make_robot_model,
    make_vmf_tracking_model,
    simulate,
)

from oracles import central_diff_grad, central_diff_hess, gauss_logpdf_1d, rel_err


def scalar_prior(mean, var):
    return GaussianPrior.from_cov(np.array([mean]), np.array([[var]]))


@pytest.fixture(scope="module")
def growth():
    return make_growth_model()


@pytest.fixture(scope="module")
def robot():
    return make_robot_model(T=20)


@pytest.fixture(scope="module")
def vmf():
    return make_vmf_tracking_model()


class TestLogTransition:
    def test_growth_density_at_its_mean(self, growth):
        x_next = 8.0 * np.cos(1.2)
        got = growth.log_transition([0.0], [x_next], k=1)
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_growth_step2_matches_scalar_oracle(self, growth):
        mean = 0.9 * 5.0 + 10.0 * 5.0 / 26.0 + 8.0 * np.cos(2.4)
        want = gauss_logpdf_1d(0.0, mean, 1.0)
        got = growth.log_transition([5.0], [0.0], k=2)
        assert got == pytest.approx(want, abs=1e-12)

    def test_unit_random_walk(self):
        model = make_linear_model(A=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]], prior=scalar_prior(0, 1))
        got = model.log_transition([0.0], [1.0], k=1)
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=1e-12)

    def test_nonfinite_input_rejected(self, growth):
        with pytest.raises(DomainError):
            growth.log_transition([np.nan], [0.0], k=1)
        with pytest.raises(DomainError):
            growth.log_transition([0.0], [np.inf], k=1)

    def test_degenerate_noise_rejected_at_construction(self):
        with pytest.raises(ModelConstructionError):
            make_linear_model(A=[[1.0]], C=[[1.0]], Q=[[0.0]], R=[[1.0]], prior=scalar_prior(0, 1))

    def test_density_integrates_to_one_on_fine_grid(self, growth):
        # 1-D transition and measurement kernels must be normalized
        grid = np.linspace(-30.0, 30.0, 60001)
        for k in (1, 3):
            vals = np.exp(growth.transition_logpdf(np.full((grid.size, 1), 2.0), grid[:, None], k))
            assert np.trapezoid(vals, grid) == pytest.approx(1.0, abs=1e-6)
        vals = np.exp(growth.measurement_logpdf(np.array([0.3]), grid[:, None], 1))
        # as a function of y the kernel is a unit-variance Gaussian; integrate over y instead
        yvals = np.exp([growth.log_measurement([y], [0.3], 1) for y in np.linspace(-20, 20, 4001)])
        assert np.trapezoid(yvals, np.linspace(-20, 20, 4001)) == pytest.approx(1.0, abs=1e-6)
        assert np.all(np.isfinite(vals))


class TestLogMeasurement:
    def test_growth_zero_residual(self, growth):
        got = growth.log_measurement([0.0], [0.0], k=1)
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_illustrative_large_reading(self):
        model = make_illustrative_model()
        want = gauss_logpdf_1d(15.0, 0.0, 0.1)
        got = model.log_measurement([15.0], [0.0], k=1)
        assert got == pytest.approx(want, abs=1e-12)

    def test_vmf_density_at_the_mode(self, vmf):
        x = np.array([-100.0, 7.0, 0.0, 5.0])
        unit, _ = vmf._bearings(x[None, :])
        y = unit[0].reshape(-1)
        per_sensor = vmf.kappa - (np.log(2 * np.pi) + np.log(scipy.special.i0e(vmf.kappa)) + vmf.kappa)
        got = vmf.log_measurement(y, x, k=1)
        assert got == pytest.approx(3.0 * per_sensor, rel=1e-12)

    def test_vmf_rejects_non_unit_bearings(self, vmf):
        y = np.tile([1.0, 0.0], 3)
        y[0] = 1.0 + 1e-6
        with pytest.raises(DomainError):
            vmf.log_measurement(y, [-100.0, 7.0, 0.0, 5.0], k=1)

    def test_vmf_circle_density_integrates_to_one(self, vmf):
        # parametrize the unit circle by angle and integrate with 1e5 nodes
        x = np.array([-50.0, 0.0, 30.0, 0.0])
        angles = np.linspace(-np.pi, np.pi, 100001)
        unit, _ = vmf._bearings(x[None, :])
        mode_angles = np.arctan2(unit[0, :, 1], unit[0, :, 0])
        log_norm = np.log(2 * np.pi) + np.log(scipy.special.i0e(vmf.kappa)) + vmf.kappa
        for s in range(3):
            dens = np.exp(vmf.kappa * np.cos(angles - mode_angles[s]) - log_norm)
            assert np.trapezoid(dens, angles) == pytest.approx(1.0, abs=1e-8)


class TestLogBesselI0:
    def test_matches_scipy_across_regimes(self):
        for x in [0.0, 0.5, 1.0, 10.0, 49.9, 50.0, 75.0, 200.0, 1000.0]:
            want = np.log(scipy.special.i0e(x)) + x
            assert log_bessel_i0(x) == pytest.approx(want, rel=2e-10, abs=1e-12)


class TestDerivatives:
    """Analytic model derivatives against central finite differences."""

    @pytest.mark.parametrize("name", ["growth", "linear", "robot", "vmf", "illustrative"])
    def test_transition_grad_hess(self, name, growth, robot, vmf):
        model, xp, xn = self._case(name, growth, robot, vmf)
        n = model.n_x
        z0 = np.concatenate([xp, xn])

        def f(z):
            return float(model.transition_logpdf(z[None, :n], z[None, n:], 2)[0])

        got_g = model.transition_grad(xp[None], xn[None], 2)[0]
        got_h = model.transition_hess(xp[None], xn[None], 2)[0]
        assert rel_err(got_g, central_diff_grad(f, z0)) < 1e-7
        assert rel_err(got_h, central_diff_hess(f, z0)) < 1e-5

    @pytest.mark.parametrize("name", ["growth", "linear", "robot", "vmf", "illustrative"])
    def test_measurement_grad_hess(self, name, growth, robot, vmf):
        model, _, x = self._case(name, growth, robot, vmf)
        rng = np.random.default_rng(5)
        y = model.sample_measurement(rng, x[None], 2)[0]

        def f(z):
            return float(model.measurement_logpdf(y, z[None, :], 2)[0])

        got_g = model.measurement_grad(y, x[None], 2)[0]
        got_h = model.measurement_hess(y, x[None], 2)[0]
        assert rel_err(got_g, central_diff_grad(f, x)) < 1e-7
        assert rel_err(got_h, central_diff_hess(f, x)) < 1e-5

    @staticmethod
    def _case(name, growth, robot, vmf):
        if name == "growth":
            return growth, np.array([1.3]), np.array([4.0])
        if name == "linear":
            model = make_linear_model(
                A=[[0.9, 0.1], [0.0, 0.8]], C=[[1.0, 0.0]], Q=np.eye(2) * 0.5,
                R=[[0.3]], prior=GaussianPrior.from_cov(np.zeros(2), np.eye(2)),
            )
            return model, np.array([0.4, -1.2]), np.array([1.0, 0.3])
        if name == "robot":
            return robot, np.array([0.5, -0.2, 0.4, 2.0, 0.7]), np.array([0.6, -0.1, 0.5, 2.2, 0.6])
        if name == "vmf":
            return vmf, np.array([-80.0, 6.0, 10.0, 4.0]), np.array([-77.0, 6.0, 12.0, 4.0])
        model = make_illustrative_model()
        return model, np.array([0.7]), np.array([0.9])


class TestSimulate:
    def test_deterministic_given_seed(self):
        model = make_linear_model(A=[[0.9]], C=[[1.0]], Q=[[1.0]], R=[[0.5]], prior=scalar_prior(0, 1))
        d1 = simulate(model, T=5, seed=42)
        d2 = simulate(model, T=5, seed=42)
        np.testing.assert_array_equal(d1.ys, d2.ys)
        np.testing.assert_array_equal(d1.xs, d2.xs)

    def test_growth_measurement_residual_variance(self, growth):
        resids = []
        for seed in range(200):
            data = simulate(growth, T=50, seed=seed)
            resids.append(data.ys[:, 0] - 0.05 * data.xs[1:, 0] ** 2)
        var = np.var(np.concatenate(resids))
        assert var == pytest.approx(1.0, rel=0.05)

    def test_transition_noise_moments(self, growth):
        # empirical covariance of 1e4 propagations of a fixed state vs Q
        rng = np.random.default_rng(0)
        x = np.full((10000, 1), 1.7)
        draws = growth.sample_transition(rng, x, k=3)
        resid = draws - growth.transition_mean(x, 3)
        emp = resid.T @ resid / resid.shape[0]
        assert np.linalg.norm(emp - growth.Q) / np.linalg.norm(growth.Q) < 0.05

    def test_measurement_noise_moments(self, robot):
        rng = np.random.default_rng(1)
        x = np.tile(np.array([1.0, 2.0, 0.3, 1.0, 0.2]), (10000, 1))
        draws = robot.sample_measurement(rng, x, k=1)
        resid = draws - robot.measurement_mean(x, 1)
        emp = resid.T @ resid / resid.shape[0]
        assert np.linalg.norm(emp - robot.R) / np.linalg.norm(robot.R) < 0.05

    def test_fixed_initial_state(self, growth):
        data = simulate(growth, T=3, seed=9, x0=[5.0])
        assert data.xs[0, 0] == 5.0

    def test_robot_matches_fine_integration_oracle(self):
        # same noise path, 10x finer integration substeps: small discretization gap
        model = make_robot_model(T=50)
        x = model.prior.mean.copy()
        rng = np.random.default_rng(3)
        noises = model._q.sample(rng, 50)
        coarse = x.copy()
        fine = x.copy()
        for k in range(1, 51):
            coarse = model.rk4_step(coarse[None], k)[0] + noises[k - 1]
            fine = model.rk4_step(fine[None], k, substep=0.001)[0] + noises[k - 1]
        assert np.linalg.norm(coarse - fine) < 1e-7


class TestVmfSampling:
    def test_bearing_sample_concentration(self, vmf):
        # angular spread of vMF(kappa=200) is approximately 1/sqrt(kappa)
        rng = np.random.default_rng(8)
        x = np.tile(np.array([-50.0, 0.0, 40.0, 0.0]), (20000, 1))
        draws = vmf.sample_measurement(rng, x, k=1).reshape(-1, 3, 2)
        unit, _ = vmf._bearings(x[:1])
        for s in range(3):
            mode = np.arctan2(unit[0, s, 1], unit[0, s, 0])
            ang = np.angle(np.exp(1j * (np.arctan2(draws[:, s, 1], draws[:, s, 0]) - mode)))
            assert abs(ang.mean()) < 3e-3
            assert np.var(ang) == pytest.approx(1.0 / 200.0, rel=0.1)

    def test_samples_have_unit_norm(self, vmf):
        rng = np.random.default_rng(2)
        draws = vmf.sample_measurement(rng, np.array([[-50.0, 1.0, 20.0, -1.0]]), k=1)
        norms = np.linalg.norm(draws.reshape(3, 2), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)


class TestInputs:
    def test_linear_input_enters_transition_and_measurement(self):
        inputs = np.array([[1.0], [2.0], [3.0]])
        model = make_linear_model(
            A=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]], prior=scalar_prior(0, 1),
            B=[[1.0]], D=[[0.5]], inputs=inputs,
        )
        np.testing.assert_allclose(model.transition_mean(np.array([[0.0]]), 2), [[2.0]])
        np.testing.assert_allclose(model.measurement_mean(np.array([[1.0]]), 3), [[2.5]])

    def test_out_of_range_step_rejected(self):
        model = make_linear_model(
            A=[[1.0]], C=[[1.0]], Q=[[1.0]], R=[[1.0]], prior=scalar_prior(0, 1),
            B=[[1.0]], inputs=np.array([[1.0]]),
        )
        with pytest.raises(DomainError):
            model.transition_mean(np.array([[0.0]]), 2)
