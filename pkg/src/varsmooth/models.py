"""State-space model contract and the concrete systems used by the experiments.

A model supplies pointwise-evaluable log densities for the state transition
and the measurement, together with their exact first and second derivatives
with respect to the state arguments.  All derivative-bearing entry points are
batched over points (leading axis) because the estimation code evaluates them
at whole sets of sigma points at once.

Conventions
-----------
Step indices run ``k = 1..T``.  ``log_transition(x_prev, x_next, k)`` is the
log density of the state at step ``k`` given the state at step ``k - 1``.
For models with exogenous inputs, ``inputs[k - 1]`` is the input held over the
interval from step ``k - 1`` to step ``k``; it drives the transition into step
``k`` and, where the measurement has a feed-through term, the measurement at
step ``k``.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DomainError, ModelConstructionError

__all__ = [
    "GaussianPrior",
    "Dataset",
    "StateSpaceModel",
    "GrowthModel",
    "LinearGaussianModel",
    "RobotModel",
    "VmfTrackingModel",
    "ScalarCorrectionModel",
    "make_growth_model",
    "make_linear_model",
    "make_robot_model",
    "make_vmf_tracking_model",
    "make_illustrative_model",
    "simulate",
    "log_bessel_i0",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def _spd_cholesky_upper(matrix: np.ndarray, name: str) -> np.ndarray:
    """Upper-triangular factor U with U.T @ U = matrix, or a construction error."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise ModelConstructionError(f"{name} must be square, got {matrix.shape}")
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise ModelConstructionError(f"{name} must be symmetric")
    try:
        lower = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise ModelConstructionError(f"{name} is not positive definite") from exc
    return lower.T.copy()


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian initial-state distribution stored via an upper Cholesky factor.

    ``chol_cov`` is upper triangular with strictly positive diagonal and
    ``chol_cov.T @ chol_cov`` equal to the prior covariance.
    """

    mean: np.ndarray
    chol_cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        chol = np.asarray(self.chol_cov, dtype=float)
        if chol.shape != (mean.size, mean.size):
            raise ModelConstructionError("prior mean / Cholesky factor sizes differ")
        if np.any(np.tril(chol, -1) != 0.0):
            raise ModelConstructionError("prior Cholesky factor must be upper triangular")
        if np.any(np.diag(chol) <= 0.0):
            raise ModelConstructionError("prior Cholesky diagonal must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol_cov", chol)

    @classmethod
    def from_cov(cls, mean: np.ndarray, cov: np.ndarray) -> "GaussianPrior":
        return cls(mean=np.asarray(mean, dtype=float), chol_cov=_spd_cholesky_upper(cov, "prior covariance"))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.chol_cov.T @ self.chol_cov

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.chol_cov.T @ rng.standard_normal(self.dim)


@dataclass(frozen=True)
class Dataset:
    """A simulated or observed measurement sequence.

    ``ys`` has shape ``(T, n_y)``.  ``xs``, present only for simulated data,
    has shape ``(T + 1, n_x)`` and includes the initial state ``x_0``.
    """

    T: int
    ys: np.ndarray
    xs: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        ys = np.atleast_2d(np.asarray(self.ys, dtype=float))
        if ys.shape[0] != self.T:
            raise DomainError(f"ys has {ys.shape[0]} rows, expected T={self.T}")
        object.__setattr__(self, "ys", ys)
        if self.xs is not None:
            xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
            if xs.shape[0] != self.T + 1:
                raise DomainError(f"xs has {xs.shape[0]} rows, expected T+1={self.T + 1}")
            object.__setattr__(self, "xs", xs)


class StateSpaceModel(abc.ABC):
    """Behavioral contract for a nonlinear, possibly non-Gaussian state-space model.

    Subclasses provide batched log densities with exact derivatives.  The
    public single-point entry points validate their arguments; the batched
    ones trust them (they sit on hot paths).
    """

    n_x: int
    n_y: int
    prior: GaussianPrior

    # ---- batched log densities and derivatives -------------------------------

    @abc.abstractmethod
    def transition_logpdf(self, x_prev: np.ndarray, x_next: np.ndarray, k: int) -> np.ndarray:
        """log p(x_k | x_{k-1}) at each row pair; shapes (m, n_x) -> (m,)."""

    @abc.abstractmethod
    def transition_grad(self, x_prev: np.ndarray, x_next: np.ndarray, k: int) -> np.ndarray:
        """Gradient w.r.t. the stacked argument (x_prev, x_next); -> (m, 2 n_x)."""

    @abc.abstractmethod
    def transition_hess(self, x_prev: np.ndarray, x_next: np.ndarray, k: int) -> np.ndarray:
        """Hessian w.r.t. the stacked argument; -> (m, 2 n_x, 2 n_x)."""

    @abc.abstractmethod
    def measurement_logpdf(self, y: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        """log p(y | x_k) at each row of x; shapes (n_y,), (m, n_x) -> (m,)."""

    @abc.abstractmethod
    def measurement_grad(self, y: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        """Gradient w.r.t. x; -> (m, n_x)."""

    @abc.abstractmethod
    def measurement_hess(self, y: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
        """Hessian w.r.t. x; -> (m, n_x, n_x)."""

    # ---- sampling ------------------------------------------------------------

    @abc.abstractmethod
    def sample_transition(self, rng: np.random.Generator, x: np.ndarray, k: int) -> np.ndarray:
        """Draw x_k given x_{k-1}; shapes (m, n_x) -> (m, n_x)."""

    @abc.abstractmethod
    def sample_measurement(self, rng: np.random.Generator, x: np.ndarray, k: int) -> np.ndarray:
        """Draw y_k given x_k; shapes (m, n_x) -> (m, n_y)."""

    # ---- validated single-point entry points ----------------------------------

    def log_transition(self, x_prev: np.ndarray, x_next: np.ndarray, k: int) -> float:
        x_prev = self._check_state(x_prev, "x_prev")
        x_next = self._check_state(x_next, "x_next")
        self._check_step(k)
        return float(self.transition_logpdf(x_prev[None, :], x_next[None, :], k)[0])

    def log_measurement(self, y: np.ndarray, x: np.ndarray, k: int) -> float:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape != (self.n_y,):
            raise DomainError(f"y has shape {y.shape}, expected ({self.n_y},)")
        if not np.all(np.isfinite(y)):
            raise DomainError("y contains non-finite entries")
        self.validate_measurement(y)
        x = self._check_state(x, "x")
        self._check_step(k)
        return float(self.measurement_logpdf(y, x[None, :], k)[0])

    def validate_measurement(self, y: np.ndarray) -> None:
        """Hook for measurement-space domain checks (e.g. unit-norm bearings)."""

    def _check_state(self, x, name: str) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.n_x,):
            raise DomainError(f"{name} has shape {x.shape}, expected ({self.n_x},)")
        if not np.all(np.isfinite(x)):
            raise DomainError(f"{name} contains non-finite entries")
        return x

    def _check_step(self, k: int) -> None:
        if k < 1:
            raise DomainError(f"step index must be >= 1, got {k}")


# ---------------------------------------------------------------------------
# Additive-Gaussian building blocks
# ---------------------------------------------------------------------------


class _GaussianNoise:
    """Precomputed quantities for a fixed Gaussian noise covariance."""

    def __init__(self, cov: np.ndarray, name: str):
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.chol_upper = _spd_cholesky_upper(self.cov, name)
        self.inv = np.linalg.inv(self.cov)
        self.log_norm = -0.5 * self.cov.shape[0] * LOG_2PI - np.sum(np.log(np.diag(self.chol_upper)))

    def logpdf_residual(self, resid: np.ndarray) -> np.ndarray:
        quad = ((resid @ self.inv) * resid).sum(axis=1)
        return self.log_norm - 0.5 * quad

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return rng.standard_normal((m, self.cov.shape[0])) @ self.chol_upper


class _AdditiveGaussianTransition:
    """Transition ``x_k = f(x_{k-1}, k) + w``, ``w ~ N(0, Q)``.

    Subclasses implement the batched mean ``transition_mean`` with Jacobian
    ``_transition_jac`` (m, n, n) and per-output-component second derivatives
    ``_transition_hess_mean`` (m, n, n, n).
    """

    _q: _GaussianNoise

    def _init_transition_noise(self, Q: np.ndarray) -> None:
        self._q = _GaussianNoise(Q, "process noise covariance Q")

    @property
    def Q(self) -> np.ndarray:
        return self._q.cov

    def transition_mean(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def _transition_jac(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def _transition_hess_mean(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def transition_logpdf(self, x_prev, x_next, k):
        resid = x_next - self.transition_mean(x_prev, k)
        return self._q.logpdf_residual(resid)

    def transition_grad(self, x_prev, x_next, k):
        n = self.n_x
        resid = x_next - self.transition_mean(x_prev, k)
        qr = resid @ self._q.inv
        jac = self._transition_jac(x_prev, k)
        grad = np.empty((x_prev.shape[0], 2 * n))
        grad[:, :n] = (qr[:, None, :] @ jac)[:, 0, :]
        grad[:, n:] = -qr
        return grad

    def transition_hess(self, x_prev, x_next, k):
        n = self.n_x
        m = x_prev.shape[0]
        resid = x_next - self.transition_mean(x_prev, k)
        qr = resid @ self._q.inv
        jac = self._transition_jac(x_prev, k)
        hess_mean = self._transition_hess_mean(x_prev, k)
        out = np.empty((m, 2 * n, 2 * n))
        qinv_jac = np.matmul(self._q.inv, jac)
        curv = (qr[:, None, :] @ hess_mean.reshape(m, n, n * n)).reshape(m, n, n)
        out[:, :n, :n] = curv - np.matmul(np.swapaxes(jac, 1, 2), qinv_jac)
        out[:, n:, :n] = qinv_jac
        out[:, :n, n:] = np.swapaxes(qinv_jac, 1, 2)
        out[:, n:, n:] = -self._q.inv
        return out

    def sample_transition(self, rng, x, k):
        return self.transition_mean(x, k) + self._q.sample(rng, x.shape[0])


class _AdditiveGaussianMeasurement:
    """Measurement ``y_k = h(x_k, k) + e``, ``e ~ N(0, R)``."""

    _r: _GaussianNoise

    def _init_measurement_noise(self, R: np.ndarray) -> None:
        self._r = _GaussianNoise(R, "measurement noise covariance R")

    @property
    def R(self) -> np.ndarray:
        return self._r.cov

    def measurement_mean(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def _measurement_jac(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def _measurement_hess_mean(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def measurement_logpdf(self, y, x, k):
        resid = y[None, :] - self.measurement_mean(x, k)
        return self._r.logpdf_residual(resid)

    def measurement_grad(self, y, x, k):
        resid = y[None, :] - self.measurement_mean(x, k)
        rr = resid @ self._r.inv
        jac = self._measurement_jac(x, k)
        return (rr[:, None, :] @ jac)[:, 0, :]

    def measurement_hess(self, y, x, k):
        m, n = x.shape
        resid = y[None, :] - self.measurement_mean(x, k)
        rr = resid @ self._r.inv
        jac = self._measurement_jac(x, k)
        hess_mean = self._measurement_hess_mean(x, k)
        rinv_jac = np.matmul(self._r.inv, jac)
        curv = (rr[:, None, :] @ hess_mean.reshape(m, self.n_y, n * n)).reshape(m, n, n)
        return curv - np.matmul(np.swapaxes(jac, 1, 2), rinv_jac)

    def sample_measurement(self, rng, x, k):
        return self.measurement_mean(x, k) + self._r.sample(rng, x.shape[0])


# ---------------------------------------------------------------------------
# Concrete models
# ---------------------------------------------------------------------------


class GrowthModel(_AdditiveGaussianTransition, _AdditiveGaussianMeasurement, StateSpaceModel):
    """Scalar benchmark system with oscillatory forcing and quadratic measurement.

    Transition mean into step k:  0.9 x + 10 x / (1 + x^2) + 8 cos(1.2 k), Q = 1.
    Measurement mean:             0.05 x^2, R = 1.  Prior N(5, 4).
    """

    def __init__(self):
        self.n_x = 1
        self.n_y = 1
        self.prior = GaussianPrior.from_cov(np.array([5.0]), np.array([[4.0]]))
        self._init_transition_noise(np.array([[1.0]]))
        self._init_measurement_noise(np.array([[1.0]]))

    def transition_mean(self, x, k):
        s = x[:, 0]
        return (0.9 * s + 10.0 * s / (1.0 + s**2) + 8.0 * np.cos(1.2 * k))[:, None]

    def _transition_jac(self, x, k):
        s = x[:, 0]
        return (0.9 + 10.0 * (1.0 - s**2) / (1.0 + s**2) ** 2)[:, None, None]

    def _transition_hess_mean(self, x, k):
        s = x[:, 0]
        return (20.0 * s * (s**2 - 3.0) / (1.0 + s**2) ** 3)[:, None, None, None]

    def measurement_mean(self, x, k):
        return 0.05 * x**2

    def _measurement_jac(self, x, k):
        return 0.1 * x[:, :, None]

    def _measurement_hess_mean(self, x, k):
        return np.full((x.shape[0], 1, 1, 1), 0.1)


class LinearGaussianModel(_AdditiveGaussianTransition, _AdditiveGaussianMeasurement, StateSpaceModel):
    """Linear system x_k = A x_{k-1} + B u_{k-1} + w,  y_k = C x_k + D u_{k-1} + e."""

    def __init__(self, A, C, Q, R, prior: GaussianPrior, B=None, D=None, inputs=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.n_x = self.A.shape[0]
        self.n_y = self.C.shape[0]
        if self.A.shape != (self.n_x, self.n_x):
            raise ModelConstructionError("A must be square")
        if self.C.shape[1] != self.n_x:
            raise ModelConstructionError("C column count must equal the state dimension")
        self.B = None if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        self.D = None if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        self.inputs = None if inputs is None else np.atleast_2d(np.asarray(inputs, dtype=float))
        if (self.B is not None or self.D is not None) and self.inputs is None:
            raise ModelConstructionError("input matrices given but no input sequence")
        self.prior = prior
        self._init_transition_noise(Q)
        self._init_measurement_noise(R)

    def _input(self, k: int) -> Optional[np.ndarray]:
        if self.inputs is None:
            return None
        if not 1 <= k <= self.inputs.shape[0]:
            raise DomainError(f"step {k} outside the stored input sequence")
        return self.inputs[k - 1]

    def transition_mean(self, x, k):
        mean = x @ self.A.T
        u = self._input(k)
        if u is not None and self.B is not None:
            mean = mean + self.B @ u
        return mean

    def _transition_jac(self, x, k):
        return np.broadcast_to(self.A, (x.shape[0], self.n_x, self.n_x))

    def _transition_hess_mean(self, x, k):
        return np.zeros((x.shape[0], self.n_x, self.n_x, self.n_x))

    def measurement_mean(self, x, k):
        mean = x @ self.C.T
        u = self._input(k)
        if u is not None and self.D is not None:
            mean = mean + self.D @ u
        return mean

    def _measurement_jac(self, x, k):
        return np.broadcast_to(self.C, (x.shape[0], self.n_y, self.n_x))

    def _measurement_hess_mean(self, x, k):
        return np.zeros((x.shape[0], self.n_y, self.n_x, self.n_x))


def default_robot_inputs(t):
    """Open-loop wheel forces: constant push plus a slow differential wiggle."""
    t = np.asarray(t, dtype=float)
    steer = 0.1 * np.sin(0.2 * t)
    return np.stack(np.broadcast_arrays(0.6 + steer, 0.6 - steer), axis=-1)


class RobotModel(_AdditiveGaussianTransition, _AdditiveGaussianMeasurement, StateSpaceModel):
    """Differential-drive robot with 5 states and a linear position/heading sensor.

    State: [x position, y position, heading, linear momentum, angular momentum].
    The estimation-side transition density is the Euler discretization of the
    continuous dynamics at the sample interval ``dt``; simulation integrates
    the continuous dynamics with fixed-step RK4 and injects process noise
    discretely every ``dt`` seconds.
    """

    def __init__(self, T, *, m=5.0, J=2.0, l=0.15, r1=1.0, r2=1.0, a=0.5,
                 Q=None, R=None, dt=0.1, prior=None, input_profile=None,
                 sim_substep=0.01):
        self.n_x = 5
        self.n_y = 3
        self.m = float(m)
        self.J = float(J)
        self.l = float(l)
        self.r1 = float(r1)
        self.r2 = float(r2)
        self.a = float(a)
        self.dt = float(dt)
        self.sim_substep = float(sim_substep)
        self.T = int(T)
        self.input_profile = input_profile if input_profile is not None else default_robot_inputs
        # inputs[k-1] is applied over the interval (k-1) dt -> k dt
        self.inputs = np.asarray([self.input_profile(i * self.dt) for i in range(self.T)], dtype=float)
        if Q is None:
            Q = np.diag([0.001, 0.001, 1.745e-3, 0.001, 0.001])
        if R is None:
            R = np.diag([0.1**2, 0.1**2, 0.0349**2])
        if prior is None:
            prior = GaussianPrior.from_cov(
                np.zeros(5), np.diag([0.1**2, 0.1**2, 0.0349**2, 0.5**2, 0.5**2])
            )
        self.prior = prior
        self._init_transition_noise(Q)
        self._init_measurement_noise(R)

    @property
    def _jl(self) -> float:
        return self.J + self.m * self.l**2

    def _drift(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Continuous-time state derivative; x (m, 5), u (2,) -> (m, 5)."""
        c3, s3 = np.cos(x[:, 2]), np.sin(x[:, 2])
        p1, p2 = x[:, 3], x[:, 4]
        jl = self._jl
        return np.stack(
            [
                c3 * p1 / self.m,
                s3 * p1 / self.m,
                p2 / jl,
                -self.r1 * p1 / self.m - self.m * self.l * p2**2 / jl**2 + u[0] + u[1],
                (self.l * p1 - self.r2) * p2 / jl + self.a * (u[0] - u[1]),
            ],
            axis=1,
        )

    def _drift_jac(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        c3, s3 = np.cos(x[:, 2]), np.sin(x[:, 2])
        p1, p2 = x[:, 3], x[:, 4]
        jl = self._jl
        out = np.zeros((x.shape[0], 5, 5))
        out[:, 0, 2] = -s3 * p1 / self.m
        out[:, 0, 3] = c3 / self.m
        out[:, 1, 2] = c3 * p1 / self.m
        out[:, 1, 3] = s3 / self.m
        out[:, 2, 4] = 1.0 / jl
        out[:, 3, 3] = -self.r1 / self.m
        out[:, 3, 4] = -2.0 * self.m * self.l * p2 / jl**2
        out[:, 4, 3] = self.l * p2 / jl
        out[:, 4, 4] = (self.l * p1 - self.r2) / jl
        return out

    def _drift_hess(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        c3, s3 = np.cos(x[:, 2]), np.sin(x[:, 2])
        p1 = x[:, 3]
        jl = self._jl
        out = np.zeros((x.shape[0], 5, 5, 5))
        out[:, 0, 2, 2] = -c3 * p1 / self.m
        out[:, 0, 2, 3] = out[:, 0, 3, 2] = -s3 / self.m
        out[:, 1, 2, 2] = -s3 * p1 / self.m
        out[:, 1, 2, 3] = out[:, 1, 3, 2] = c3 / self.m
        out[:, 3, 4, 4] = -2.0 * self.m * self.l / jl**2
        out[:, 4, 3, 4] = out[:, 4, 4, 3] = self.l / jl
        return out

    def transition_mean(self, x, k):
        u = self.inputs[min(k, self.T) - 1]
        return x + self.dt * self._drift(x, u)

    def _transition_jac(self, x, k):
        u = self.inputs[min(k, self.T) - 1]
        return np.eye(5)[None, :, :] + self.dt * self._drift_jac(x, u)

    def _transition_hess_mean(self, x, k):
        u = self.inputs[min(k, self.T) - 1]
        return self.dt * self._drift_hess(x, u)

    def measurement_mean(self, x, k):
        return x[:, :3]

    def _measurement_jac(self, x, k):
        jac = np.zeros((x.shape[0], 3, 5))
        jac[:, 0, 0] = jac[:, 1, 1] = jac[:, 2, 2] = 1.0
        return jac

    def _measurement_hess_mean(self, x, k):
        return np.zeros((x.shape[0], 3, 5, 5))

    def rk4_step(self, x: np.ndarray, k: int, substep: Optional[float] = None) -> np.ndarray:
        """Deterministic continuous-dynamics propagation over one sample interval."""
        h = self.sim_substep if substep is None else float(substep)
        n_sub = max(1, int(round(self.dt / h)))
        h = self.dt / n_sub
        t = (k - 1) * self.dt
        state = np.atleast_2d(np.asarray(x, dtype=float)).copy()
        for _ in range(n_sub):
            k1 = self._drift(state, self.input_profile(t))
            k2 = self._drift(state + 0.5 * h * k1, self.input_profile(t + 0.5 * h))
            k3 = self._drift(state + 0.5 * h * k2, self.input_profile(t + 0.5 * h))
            k4 = self._drift(state + h * k3, self.input_profile(t + h))
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        return state

    def sample_transition(self, rng, x, k):
        # Simulation truth: RK4 of the continuous dynamics + discrete noise.
        return self.rk4_step(x, k) + self._q.sample(rng, np.atleast_2d(x).shape[0])


class VmfTrackingModel(_AdditiveGaussianTransition, StateSpaceModel):
    """Constant-velocity target observed by bearing-only sensors on the unit circle.

    State: [x position, x velocity, y position, y velocity].  Each sensor
    reports a unit vector drawn from a von Mises-Fisher distribution centered
    on the true bearing from the sensor to the target, with a shared
    concentration parameter.  The measurement vector stacks the sensors'
    2-D unit vectors.
    """

    def __init__(self, *, q=0.25, tau=0.5, kappa=200.0, sensors=None, prior=None):
        self.n_x = 4
        self.q = float(q)
        self.tau = float(tau)
        self.kappa = float(kappa)
        if sensors is None:
            sensors = np.array([[100.0, 0.0], [0.0, -100.0], [0.0, 150.0]])
        self.sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        self.n_sensors = self.sensors.shape[0]
        self.n_y = 2 * self.n_sensors
        tau_blk = np.array([[1.0, tau], [0.0, 1.0]])
        q_blk = q * np.array([[tau**3 / 3.0, tau**2 / 2.0], [tau**2 / 2.0, tau]])
        self.A = np.kron(np.eye(2), tau_blk)
        if prior is None:
            prior = GaussianPrior.from_cov(
                np.array([-100.0, 7.0, 0.0, 5.0]), np.diag([20.0**2, 1.0, 1.0, 1.0])
            )
        self.prior = prior
        self._init_transition_noise(np.kron(np.eye(2), q_blk))
        # log of the circular-vMF normalizer 2 pi I_0(kappa)
        self._log_norm_per_sensor = LOG_2PI + log_bessel_i0(self.kappa)
        self._pos_idx = np.array([0, 2])

    def transition_mean(self, x, k):
        return x @ self.A.T

    def _transition_jac(self, x, k):
        return np.broadcast_to(self.A, (x.shape[0], 4, 4))

    def _transition_hess_mean(self, x, k):
        return np.zeros((x.shape[0], 4, 4, 4))

    def validate_measurement(self, y: np.ndarray) -> None:
        bearings = y.reshape(self.n_sensors, 2)
        norms = np.linalg.norm(bearings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DomainError(f"bearing vectors must have unit norm, got norms {norms}")

    def _bearings(self, x: np.ndarray):
        """Unit vectors and ranges from each sensor to each state; guards r ~ 0."""
        diff = x[:, self._pos_idx][:, None, :] - self.sensors[None, :, :]  # (m, s, 2)
        rng = np.linalg.norm(diff, axis=2)
        if np.any(rng < 1e-9):
            raise DomainError("target position coincides with a sensor location")
        return diff / rng[:, :, None], rng

    def measurement_logpdf(self, y, x, k):
        ysens = y.reshape(self.n_sensors, 2)
        unit, _ = self._bearings(x)
        dots = np.einsum("msa,sa->ms", unit, ysens)
        return self.kappa * dots.sum(axis=1) - self.n_sensors * self._log_norm_per_sensor

    def measurement_grad(self, y, x, k):
        ysens = y.reshape(self.n_sensors, 2)
        unit, rng = self._bearings(x)
        dots = np.einsum("msa,sa->ms", unit, ysens)
        gv = self.kappa * (ysens[None, :, :] - dots[:, :, None] * unit) / rng[:, :, None]
        out = np.zeros((x.shape[0], 4))
        out[:, self._pos_idx] = gv.sum(axis=1)
        return out

    def measurement_hess(self, y, x, k):
        ysens = y.reshape(self.n_sensors, 2)
        unit, rng = self._bearings(x)
        dots = np.einsum("msa,sa->ms", unit, ysens)
        uy = np.einsum("msa,sb->msab", unit, ysens)
        uu = np.einsum("msa,msb->msab", unit, unit)
        eye = np.eye(2)[None, None, :, :]
        hv = (
            self.kappa
            * (-uy - np.swapaxes(uy, 2, 3) - dots[:, :, None, None] * eye
               + 3.0 * dots[:, :, None, None] * uu)
            / rng[:, :, None, None] ** 2
        )
        out = np.zeros((x.shape[0], 4, 4))
        out[np.ix_(range(x.shape[0]), self._pos_idx, self._pos_idx)] = hv.sum(axis=1)
        return out

    def sample_measurement(self, rng, x, k):
        unit, _ = self._bearings(np.atleast_2d(x))
        angles = np.arctan2(unit[:, :, 1], unit[:, :, 0])
        drawn = rng.vonmises(angles, self.kappa)
        out = np.stack([np.cos(drawn), np.sin(drawn)], axis=2)
        return out.reshape(x.shape[0], self.n_y)


class ScalarCorrectionModel(_AdditiveGaussianTransition, _AdditiveGaussianMeasurement, StateSpaceModel):
    """Single-step correction study: signed-quadratic sensor, near-static state.

    Measurement mean 0.01 x |x| with noise variance 0.1 and prior N(0, 0.4).
    The state transition is a random walk with a tiny process variance so the
    single correction step fits the standard two-slice machinery without a
    degenerate joint covariance; the same transition is used by every
    estimator compared on this model, so comparisons are consistent.
    """

    def __init__(self, walk_var: float = 1e-4):
        self.n_x = 1
        self.n_y = 1
        self.prior = GaussianPrior.from_cov(np.array([0.0]), np.array([[0.4]]))
        self._init_transition_noise(np.array([[walk_var]]))
        self._init_measurement_noise(np.array([[0.1]]))

    def transition_mean(self, x, k):
        return x

    def _transition_jac(self, x, k):
        return np.ones((x.shape[0], 1, 1))

    def _transition_hess_mean(self, x, k):
        return np.zeros((x.shape[0], 1, 1, 1))

    def measurement_mean(self, x, k):
        return 0.01 * x * np.abs(x)

    def _measurement_jac(self, x, k):
        return 0.02 * np.abs(x)[:, :, None]

    def _measurement_hess_mean(self, x, k):
        return 0.02 * np.sign(x)[:, :, None, None]


# ---------------------------------------------------------------------------
# Constructors and helpers
# ---------------------------------------------------------------------------


def make_growth_model() -> GrowthModel:
    return GrowthModel()


def make_linear_model(A, C, Q, R, prior, B=None, D=None, inputs=None) -> LinearGaussianModel:
    return LinearGaussianModel(A=A, C=C, Q=Q, R=R, prior=prior, B=B, D=D, inputs=inputs)


def make_robot_model(T, **kwargs) -> RobotModel:
    return RobotModel(T, **kwargs)


def make_vmf_tracking_model(**kwargs) -> VmfTrackingModel:
    return VmfTrackingModel(**kwargs)


def make_illustrative_model() -> ScalarCorrectionModel:
    return ScalarCorrectionModel()


def simulate(model: StateSpaceModel, T: int, seed: int, x0=None) -> Dataset:
    """Draw a state/measurement trajectory of length ``T``.

    ``x0`` fixes the initial state; otherwise it is drawn from the prior.
    Reproducible: identical arguments yield identical datasets.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    rng = np.random.default_rng(seed)
    x = model.prior.sample(rng) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    xs = np.empty((T + 1, model.n_x))
    ys = np.empty((T, model.n_y))
    xs[0] = x
    for k in range(1, T + 1):
        x = model.sample_transition(rng, x[None, :], k)[0]
        xs[k] = x
        ys[k - 1] = model.sample_measurement(rng, x[None, :], k)[0]
    return Dataset(T=T, ys=ys, xs=xs, seed=seed)


def log_bessel_i0(x: float) -> float:
    """log I_0(x) for the modified Bessel function of order zero.

    Power series below x = 50 (all terms positive, no cancellation), the
    standard large-argument expansion above; the switchover keeps the relative
    error under 1e-10 on both sides.
    """
    x = abs(float(x))
    if x < 50.0:
        quarter_sq = 0.25 * x * x
        term = 1.0
        total = 1.0
        m = 0
        while True:
            m += 1
            term *= quarter_sq / (m * m)
            total += term
            if term < 1e-17 * total:
                break
        return float(np.log(total))
    # I_0(x) ~ e^x / sqrt(2 pi x) * sum_k a_k / x^k, a_k = a_{k-1} (2k-1)^2 / (8k)
    coeff = 1.0
    series = 1.0
    for k in range(1, 7):
        coeff *= (2 * k - 1) ** 2 / (8.0 * k)
        series += coeff / x**k
    return x - 0.5 * np.log(2.0 * np.pi * x) + float(np.log(series))
