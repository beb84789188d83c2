"""Reference estimators: Kalman/RTS, unscented variants, particle and grid filters.

These provide exact solutions on linear-Gaussian systems, an asymptotically
exact Monte Carlo reference, and a dense-grid implementation of the exact
Bayes recursions for scalar systems (the ground truth the divergence metrics
are computed against).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

from .exceptions import DomainError, EvaluationError, GridRangeError
from .models import Dataset, LinearGaussianModel, StateSpaceModel
from .quadrature import QuadratureRule, transform, unscented_rule

__all__ = [
    "GridDensity",
    "ParticleEnsemble",
    "KalmanResult",
    "SmootherResult",
    "PfResult",
    "GridFilterResult",
    "GridSmoothResult",
    "kalman_filter",
    "rts_smooth",
    "ukf_filter",
    "urtss_smooth",
    "bootstrap_pf",
    "grid_filter",
    "grid_smooth",
]

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridDensity:
    """A 1-D density discretized on a uniform grid, normalized under trapezoid."""

    lo: float
    hi: float
    n: int
    log_density: np.ndarray

    def __post_init__(self):
        if self.n < 100:
            raise DomainError("grid densities need at least 100 points")
        object.__setattr__(self, "log_density", np.asarray(self.log_density, dtype=float))
        total = float(np.trapezoid(np.exp(self.log_density), dx=self.spacing))
        if abs(total - 1.0) > 1e-10:
            raise DomainError(f"grid density integrates to {total}, not 1")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def mean(self) -> float:
        return float(np.trapezoid(self.points * self.density, dx=self.spacing))

    def var(self) -> float:
        m = self.mean()
        return float(np.trapezoid((self.points - m) ** 2 * self.density, dx=self.spacing))


@dataclass
class ParticleEnsemble:
    """Weighted particles; weights normalized in log space."""

    particles: np.ndarray
    log_weights: np.ndarray

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(np.exp(2.0 * self.log_weights)))


@dataclass
class KalmanResult:
    means: np.ndarray  # (T, n_x) filtered
    covs: np.ndarray  # (T, n_x, n_x)
    pred_means: np.ndarray
    pred_covs: np.ndarray
    cross_covs: np.ndarray  # (T, n_x, n_x): Cov(x_{k-1}, x_k | y_{1:k-1})-side gain input
    loglik: float


@dataclass
class SmootherResult:
    means: np.ndarray  # (T+1, n_x) smoothed, including step 0
    covs: np.ndarray  # (T+1, n_x, n_x)
    cross_covs: np.ndarray  # (T, n_x, n_x): smoothed Cov(x_{k-1}, x_k)


@dataclass
class PfResult:
    means: np.ndarray
    covs: np.ndarray
    loglik: float
    ess: np.ndarray
    final_ensemble: ParticleEnsemble


@dataclass
class GridFilterResult:
    filtered: List[GridDensity]  # steps 1..T
    predicted: List[GridDensity]  # steps 1..T (before the measurement update)
    loglik: float


@dataclass
class GridSmoothResult:
    smoothed: List[GridDensity]  # steps 0..T
    loglik: float


# ---------------------------------------------------------------------------
# Kalman filter / RTS smoother (exact, linear-Gaussian)
# ---------------------------------------------------------------------------


def _gauss_loglik(resid: np.ndarray, cov: np.ndarray) -> float:
    chol = np.linalg.cholesky(cov)
    z = scipy.linalg.solve_triangular(chol, resid, lower=True)
    return float(-0.5 * resid.size * LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * z @ z)


def kalman_filter(model: LinearGaussianModel, data: Dataset) -> KalmanResult:
    """Exact filtering recursion with the marginal log-evidence."""
    n = model.n_x
    T = data.T
    means = np.empty((T, n))
    covs = np.empty((T, n, n))
    pred_means = np.empty((T, n))
    pred_covs = np.empty((T, n, n))
    cross = np.empty((T, n, n))
    m, p = model.prior.mean, model.prior.cov
    loglik = 0.0
    for k in range(1, T + 1):
        m_pred = model.transition_mean(m[None, :], k)[0]
        p_pred = model.A @ p @ model.A.T + model.Q
        cross[k - 1] = p @ model.A.T
        y_pred = model.measurement_mean(m_pred[None, :], k)[0]
        s = model.C @ p_pred @ model.C.T + model.R
        resid = data.ys[k - 1] - y_pred
        loglik += _gauss_loglik(resid, s)
        gain = np.linalg.solve(s, model.C @ p_pred).T
        m = m_pred + gain @ resid
        p = p_pred - gain @ s @ gain.T
        p = 0.5 * (p + p.T)
        means[k - 1], covs[k - 1] = m, p
        pred_means[k - 1], pred_covs[k - 1] = m_pred, p_pred
    return KalmanResult(means, covs, pred_means, pred_covs, cross, loglik)


def rts_smooth(model: LinearGaussianModel, data: Dataset, filtered: Optional[KalmanResult] = None) -> SmootherResult:
    """Exact backward smoothing pass, including the initial state."""
    filt = filtered if filtered is not None else kalman_filter(model, data)
    n = model.n_x
    T = data.T
    means = np.empty((T + 1, n))
    covs = np.empty((T + 1, n, n))
    cross_sm = np.empty((T, n, n))
    means[T], covs[T] = filt.means[T - 1], filt.covs[T - 1]
    f_means = np.vstack([model.prior.mean[None, :], filt.means])
    f_covs = np.concatenate([model.prior.cov[None, :, :], filt.covs], axis=0)
    for k in range(T - 1, -1, -1):
        gain = np.linalg.solve(filt.pred_covs[k], filt.cross_covs[k].T).T
        means[k] = f_means[k] + gain @ (means[k + 1] - filt.pred_means[k])
        covs[k] = f_covs[k] + gain @ (covs[k + 1] - filt.pred_covs[k]) @ gain.T
        covs[k] = 0.5 * (covs[k] + covs[k].T)
        cross_sm[k] = gain @ covs[k + 1]
    return SmootherResult(means, covs, cross_sm)


# ---------------------------------------------------------------------------
# Unscented filter / smoother
# ---------------------------------------------------------------------------


def _chol_upper_of(cov: np.ndarray) -> np.ndarray:
    return np.linalg.cholesky(0.5 * (cov + cov.T)).T


def ukf_filter(model: StateSpaceModel, data: Dataset, rule: Optional[QuadratureRule] = None) -> KalmanResult:
    """Sigma-point filter for additive-noise models (needs mean functions and Q, R)."""
    n = model.n_x
    rule = rule if rule is not None else unscented_rule(n)
    w = rule.weights
    T = data.T
    means = np.empty((T, n))
    covs = np.empty((T, n, n))
    pred_means = np.empty((T, n))
    pred_covs = np.empty((T, n, n))
    cross = np.empty((T, n, n))
    m, p = model.prior.mean, model.prior.cov
    loglik = 0.0
    for k in range(1, T + 1):
        pts = transform(rule, m, _chol_upper_of(p))
        fpts = model.transition_mean(pts, k)
        m_pred = w @ fpts
        dev_f = fpts - m_pred
        p_pred = np.einsum("j,ja,jb->ab", w, dev_f, dev_f) + model.Q
        cross[k - 1] = np.einsum("j,ja,jb->ab", w, pts - m, dev_f)
        pts_u = transform(rule, m_pred, _chol_upper_of(p_pred))
        hpts = model.measurement_mean(pts_u, k)
        y_pred = w @ hpts
        dev_h = hpts - y_pred
        s = np.einsum("j,ja,jb->ab", w, dev_h, dev_h) + model.R
        p_xy = np.einsum("j,ja,jb->ab", w, pts_u - m_pred, dev_h)
        resid = data.ys[k - 1] - y_pred
        loglik += _gauss_loglik(resid, s)
        gain = np.linalg.solve(s.T, p_xy.T).T
        m = m_pred + gain @ resid
        p = p_pred - gain @ s @ gain.T
        p = 0.5 * (p + p.T)
        means[k - 1], covs[k - 1] = m, p
        pred_means[k - 1], pred_covs[k - 1] = m_pred, p_pred
    return KalmanResult(means, covs, pred_means, pred_covs, cross, loglik)


def urtss_smooth(model: StateSpaceModel, data: Dataset, rule: Optional[QuadratureRule] = None,
                 filtered: Optional[KalmanResult] = None) -> SmootherResult:
    """Unscented backward smoothing pass, including the initial state."""
    filt = filtered if filtered is not None else ukf_filter(model, data, rule)
    n = model.n_x
    T = data.T
    means = np.empty((T + 1, n))
    covs = np.empty((T + 1, n, n))
    cross_sm = np.empty((T, n, n))
    means[T], covs[T] = filt.means[T - 1], filt.covs[T - 1]
    f_means = np.vstack([model.prior.mean[None, :], filt.means])
    f_covs = np.concatenate([model.prior.cov[None, :, :], filt.covs], axis=0)
    for k in range(T - 1, -1, -1):
        gain = np.linalg.solve(filt.pred_covs[k], filt.cross_covs[k].T).T
        means[k] = f_means[k] + gain @ (means[k + 1] - filt.pred_means[k])
        covs[k] = f_covs[k] + gain @ (covs[k + 1] - filt.pred_covs[k]) @ gain.T
        covs[k] = 0.5 * (covs[k] + covs[k].T)
        cross_sm[k] = gain @ covs[k + 1]
    return SmootherResult(means, covs, cross_sm)


# ---------------------------------------------------------------------------
# Bootstrap particle filter
# ---------------------------------------------------------------------------


def _systematic_resample(rng: np.random.Generator, weights: np.ndarray) -> np.ndarray:
    n = weights.size
    positions = (np.arange(n) + rng.uniform()) / n
    return np.searchsorted(np.cumsum(weights), positions)


def bootstrap_pf(
    model: StateSpaceModel,
    data: Dataset,
    n_particles: int,
    seed: int,
    resample_threshold: float = 0.5,
) -> PfResult:
    """Propagate-from-transition particle filter with systematic resampling.

    Also accumulates the standard unbiased-in-expectation log-evidence
    estimate via log-sum-exp.
    """
    rng = np.random.default_rng(seed)
    n = model.n_x
    big_n = int(n_particles)
    particles = model.prior.mean + rng.standard_normal((big_n, n)) @ model.prior.chol_cov
    logw = np.full(big_n, -np.log(big_n))
    means = np.empty((data.T, n))
    covs = np.empty((data.T, n, n))
    ess_hist = np.empty(data.T)
    loglik = 0.0
    for k in range(1, data.T + 1):
        particles = model.sample_transition(rng, particles, k)
        incr = model.measurement_logpdf(data.ys[k - 1], particles, k)
        logw_un = logw + incr
        shift = float(np.max(logw_un))
        if not np.isfinite(shift):
            raise EvaluationError(f"all particle weights vanished at step {k}")
        total = shift + np.log(np.sum(np.exp(logw_un - shift)))
        loglik += total  # previous weights were normalized
        logw = logw_un - total
        weights = np.exp(logw)
        ess = 1.0 / float(np.sum(weights**2))
        ess_hist[k - 1] = ess
        means[k - 1] = weights @ particles
        dev = particles - means[k - 1]
        covs[k - 1] = np.einsum("j,ja,jb->ab", weights, dev, dev)
        if ess < resample_threshold * big_n:
            idx = _systematic_resample(rng, weights)
            particles = particles[idx]
            logw = np.full(big_n, -np.log(big_n))
    return PfResult(means, covs, loglik, ess_hist, ParticleEnsemble(particles, logw))


# ---------------------------------------------------------------------------
# Grid filter / smoother (1-D exact Bayes recursions)
# ---------------------------------------------------------------------------


def _check_boundary_mass(density: np.ndarray, spacing: float, where: str) -> None:
    edge = (density[0] + density[1] + density[-2] + density[-1]) * spacing
    if edge > 1e-6:
        raise GridRangeError(f"{where}: boundary mass {edge:.2e} exceeds 1e-6; widen the grid")


def _grid_setup(model: StateSpaceModel, lo: float, hi: float, n: int):
    if model.n_x != 1:
        raise DomainError("grid recursions are implemented for scalar states only")
    if n < 100:
        raise DomainError("need at least 100 grid points")
    pts = np.linspace(lo, hi, n)
    spacing = pts[1] - pts[0]
    trapw = np.full(n, spacing)
    trapw[0] = trapw[-1] = 0.5 * spacing
    return pts, spacing, trapw


# Relative source cutoff at the density storage floor (values this small were
# floored anyway) and a kernel reach beyond which the Gaussian is below
# float64 resolution: both truncations are exact at working precision.
_SUPPORT_CUTOFF = 1e-280
_KERNEL_REACH_SIGMAS = 8.5
_CHUNK = 512


def _apply_transition_forward(model: StateSpaceModel, pts: np.ndarray, k: int, source: np.ndarray) -> np.ndarray:
    """out_i = sum_j p(pts[i] | pts[j]) source[j] over the significant sources."""
    f = model.transition_mean(pts[:, None], k)[:, 0]
    q = float(model.Q[0, 0])
    reach = _KERNEL_REACH_SIGMAS * np.sqrt(q)
    active = np.flatnonzero(source > source.max() * _SUPPORT_CUTOFF)
    centers = f[active]
    weights = source[active]
    order = np.argsort(centers)
    centers = centers[order]
    weights = weights[order]
    out = np.zeros(pts.size)
    for c0 in range(0, centers.size, _CHUNK):
        c1 = min(c0 + _CHUNK, centers.size)
        lo = int(np.searchsorted(pts, centers[c0] - reach))
        hi = int(np.searchsorted(pts, centers[c1 - 1] + reach))
        if lo >= hi:
            continue
        resid = pts[lo:hi, None] - centers[None, c0:c1]
        resid *= resid
        resid *= -0.5 / q
        np.exp(resid, out=resid)
        out[lo:hi] += resid @ weights[c0:c1]
    out /= np.sqrt(2.0 * np.pi * q)
    return out


def _apply_transition_backward(model: StateSpaceModel, pts: np.ndarray, k: int, source: np.ndarray) -> np.ndarray:
    """out_j = sum_i p(pts[i] | pts[j]) source[i] over the significant sources."""
    f = model.transition_mean(pts[:, None], k)[:, 0]
    q = float(model.Q[0, 0])
    reach = _KERNEL_REACH_SIGMAS * np.sqrt(q)
    active = np.flatnonzero(source > source.max() * _SUPPORT_CUTOFF)
    rows = pts[active]
    weights = source[active]
    order = np.argsort(f)
    out = np.zeros(pts.size)
    for c0 in range(0, order.size, _CHUNK):
        cols = order[c0 : c0 + _CHUNK]
        fc = f[cols]
        lo = int(np.searchsorted(rows, fc[0] - reach))
        hi = int(np.searchsorted(rows, fc[-1] + reach))
        if lo >= hi:
            continue
        resid = rows[lo:hi, None] - fc[None, :]
        resid *= resid
        resid *= -0.5 / q
        np.exp(resid, out=resid)
        out[cols] = weights[lo:hi] @ resid
    out /= np.sqrt(2.0 * np.pi * q)
    return out


def _prior_density(model: StateSpaceModel, pts: np.ndarray) -> np.ndarray:
    mean = float(model.prior.mean[0])
    var = float(model.prior.cov[0, 0])
    return np.exp(-0.5 * (pts - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _normalize(density: np.ndarray, trapw: np.ndarray) -> np.ndarray:
    total = float(trapw @ density)
    if not np.isfinite(total) or total <= 0.0:
        raise GridRangeError("density mass vanished on the grid")
    return density / total


def _to_grid_density(density: np.ndarray, lo: float, hi: float) -> GridDensity:
    with np.errstate(divide="ignore"):
        logd = np.log(np.maximum(density, 1e-300))
    return GridDensity(lo=lo, hi=hi, n=density.size, log_density=logd)


def grid_filter(model: StateSpaceModel, data: Dataset, lo: float, hi: float, n: int) -> GridFilterResult:
    """Dense-grid filtering recursion; exact Bayes up to discretization.

    The measurement update runs in log space so that arbitrarily surprising
    measurements (step evidence far below the floating-point range) still
    produce a normalized posterior and a finite log evidence.
    """
    pts, spacing, trapw = _grid_setup(model, lo, hi, n)
    dens = _normalize(_prior_density(model, pts), trapw)
    filtered: List[GridDensity] = []
    predicted: List[GridDensity] = []
    loglik = 0.0
    for k in range(1, data.T + 1):
        pred = _apply_transition_forward(model, pts, k, trapw * dens)
        pred = _normalize(pred, trapw)  # kernel columns integrate to 1; guards drift
        # exact log of the prediction; cells that underflowed to zero drop out
        with np.errstate(divide="ignore"):
            log_unnorm = model.measurement_logpdf(data.ys[k - 1], pts[:, None], k) + np.log(pred)
        shift = float(np.max(log_unnorm))
        if not np.isfinite(shift):
            raise GridRangeError(f"step {k}: posterior mass vanished on the grid")
        scaled = np.exp(log_unnorm - shift)
        step_ev = float(trapw @ scaled)
        if not np.isfinite(step_ev) or step_ev <= 0.0:
            raise GridRangeError(f"step {k}: posterior mass vanished on the grid")
        loglik += shift + float(np.log(step_ev))
        dens = scaled / step_ev
        _check_boundary_mass(dens, spacing, f"step {k} posterior")
        filtered.append(_to_grid_density(dens, lo, hi))
        predicted.append(_to_grid_density(pred, lo, hi))
    return GridFilterResult(filtered=filtered, predicted=predicted, loglik=loglik)


def grid_smooth(model: StateSpaceModel, data: Dataset, lo: float, hi: float, n: int) -> GridSmoothResult:
    """Dense-grid smoothing: forward filter plus backward marginal recursion."""
    pts, spacing, trapw = _grid_setup(model, lo, hi, n)
    forward = grid_filter(model, data, lo, hi, n)
    prior = _normalize(_prior_density(model, pts), trapw)
    filt = [prior] + [g.density for g in forward.filtered]
    pred = [g.density for g in forward.predicted]
    smoothed = [None] * (data.T + 1)
    smoothed[data.T] = filt[data.T]
    current = filt[data.T]
    for k in range(data.T - 1, -1, -1):
        ratio = np.where(pred[k] > 1e-300, current / np.maximum(pred[k], 1e-300), 0.0)
        integral = _apply_transition_backward(model, pts, k + 1, trapw * ratio)
        current = _normalize(filt[k] * integral, trapw)
        _check_boundary_mass(current, spacing, f"step {k} smoothed")
        smoothed[k] = current
    return GridSmoothResult(
        smoothed=[_to_grid_density(d, lo, hi) for d in smoothed], loglik=forward.loglik
    )
