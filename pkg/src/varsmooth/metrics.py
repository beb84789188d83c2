"""Divergences and error measures between densities and Gaussian estimates.

Grid-based divergences evaluate the Gaussian on the grid of the reference
density and integrate with the trapezoid rule.  Densities below 1e-300 are
floored inside logarithms, and integrand terms whose outer density is below
the floor contribute zero, so results are bit-reproducible for a given grid.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .baselines import GridDensity
from .exceptions import DomainError
from .vi_core import GaussianMarginal

__all__ = ["kl_grid_gaussian", "skl", "js", "kl_gauss_gauss", "position_error"]

_FLOOR = 1e-300


def _gaussian_on_grid(grid: GridDensity, marginal: GaussianMarginal) -> np.ndarray:
    if marginal.dim != 1:
        raise DomainError("grid divergences require a 1-D Gaussian")
    mean = float(marginal.mean[0])
    var = float(marginal.cov[0, 0])
    if var <= 0.0:
        raise DomainError("Gaussian variance must be positive")
    pts = grid.points
    return np.exp(-0.5 * (pts - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def _trap_weights(grid: GridDensity) -> np.ndarray:
    w = np.full(grid.n, grid.spacing)
    w[0] = w[-1] = 0.5 * grid.spacing
    return w


def _kl_density_arrays(p: np.ndarray, q: np.ndarray, weights: np.ndarray) -> float:
    log_ratio = np.log(np.maximum(p, _FLOOR)) - np.log(np.maximum(q, _FLOOR))
    terms = np.where(p > _FLOOR, p * log_ratio, 0.0)
    return float(weights @ terms)


def kl_grid_gaussian(p: GridDensity, q: GaussianMarginal, direction: str = "pq") -> float:
    """KL divergence between a grid density and a 1-D Gaussian.

    ``direction="pq"`` integrates p log(p/q); ``"qp"`` integrates q log(q/p)
    with the Gaussian evaluated on the grid.
    """
    qdens = _gaussian_on_grid(p, q)
    weights = _trap_weights(p)
    if direction == "pq":
        return _kl_density_arrays(p.density, qdens, weights)
    if direction == "qp":
        return _kl_density_arrays(qdens, p.density, weights)
    raise DomainError(f"unknown direction {direction!r}")


def skl(p: GridDensity, q: GaussianMarginal) -> float:
    """Symmetric KL: KL(p||q) + KL(q||p)."""
    return kl_grid_gaussian(p, q, "pq") + kl_grid_gaussian(p, q, "qp")


def js(p: GridDensity, q: Union[GaussianMarginal, GridDensity]) -> float:
    """Jensen-Shannon divergence on the grid; bounded by log 2."""
    if isinstance(q, GridDensity):
        if (q.lo, q.hi, q.n) != (p.lo, p.hi, p.n):
            raise DomainError("grid densities must share their grid")
        qdens = q.density
    else:
        qdens = _gaussian_on_grid(p, q)
    pdens = p.density
    mdens = 0.5 * (pdens + qdens)
    weights = _trap_weights(p)
    return 0.5 * _kl_density_arrays(pdens, mdens, weights) + 0.5 * _kl_density_arrays(
        qdens, mdens, weights
    )


def kl_gauss_gauss(p: GaussianMarginal, q: GaussianMarginal) -> float:
    """Closed-form KL between two Gaussians of the same dimension."""
    if p.dim != q.dim:
        raise DomainError("dimension mismatch")
    q_inv = np.linalg.inv(q.cov)
    diff = q.mean - p.mean
    _, logdet_p = np.linalg.slogdet(p.cov)
    _, logdet_q = np.linalg.slogdet(q.cov)
    return float(
        0.5 * (np.trace(q_inv @ p.cov) + diff @ q_inv @ diff - p.dim + logdet_q - logdet_p)
    )


def position_error(
    est_means: Sequence[np.ndarray],
    ref_means: Sequence[np.ndarray],
    indices: Sequence[int],
) -> np.ndarray:
    """Per-step Euclidean distance between selected state coordinates."""
    est = np.atleast_2d(np.asarray(est_means, dtype=float))
    ref = np.atleast_2d(np.asarray(ref_means, dtype=float))
    if est.shape != ref.shape:
        raise DomainError(f"trajectory shapes differ: {est.shape} vs {ref.shape}")
    idx = np.asarray(indices, dtype=int)
    return np.linalg.norm(est[:, idx] - ref[:, idx], axis=1)
