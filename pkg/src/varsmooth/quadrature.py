"""Sigma-point quadrature for Gaussian expectations.

A :class:`QuadratureRule` holds unit-space nodes and weights for a zero-mean,
identity-covariance Gaussian.  Expectations under an arbitrary Gaussian are
obtained by pushing the nodes through the affine map ``mean + chol_upper.T @ xi``,
where ``chol_upper`` is the upper-triangular factor satisfying
``chol_upper.T @ chol_upper = covariance``.  The affinity of that map in both
``mean`` and the entries of ``chol_upper`` is what downstream derivative code
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import DomainError, EvaluationError

__all__ = ["QuadratureRule", "unscented_rule", "transform", "expect"]


@dataclass(frozen=True)
class QuadratureRule:
    """Unit-space quadrature nodes and weights.

    Attributes
    ----------
    dim : int
        Dimension of the integration space.
    points : ndarray, shape (n_points, dim)
        Unit-space nodes.
    weights : ndarray, shape (n_points,)
        Node weights.  They sum to one and reproduce the first two moments of
        the standard Gaussian exactly.
    """

    dim: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def unscented_rule(dim: int, alpha: float = 1.0, kappa: float = 0.0) -> QuadratureRule:
    """Third-order unscented rule with ``2 * dim + 1`` symmetric nodes.

    With spread ``lam = alpha**2 * (dim + kappa) - dim`` the nodes are the
    origin (weight ``lam / (dim + lam)``) and ``+-sqrt(dim + lam) * e_i`` (each
    with weight ``1 / (2 * (dim + lam))``).

    Raises
    ------
    DomainError
        If ``dim < 1`` or ``dim + lam <= 0``.
    """
    if dim < 1:
        raise DomainError(f"dim must be >= 1, got {dim}")
    lam = alpha**2 * (dim + kappa) - dim
    if dim + lam <= 0.0:
        raise DomainError(f"require dim + lambda > 0, got {dim + lam}")
    scale = np.sqrt(dim + lam)
    points = np.zeros((2 * dim + 1, dim))
    points[1 : dim + 1] = scale * np.eye(dim)
    points[dim + 1 :] = -scale * np.eye(dim)
    weights = np.full(2 * dim + 1, 1.0 / (2.0 * (dim + lam)))
    weights[0] = lam / (dim + lam)
    return QuadratureRule(dim=dim, points=points, weights=weights)


def transform(rule: QuadratureRule, mean: np.ndarray, chol_upper: np.ndarray) -> np.ndarray:
    """Map unit nodes through a Gaussian with the given mean and Cholesky factor.

    Parameters
    ----------
    mean : ndarray, shape (dim,)
    chol_upper : ndarray, shape (dim, dim)
        Upper-triangular factor with ``chol_upper.T @ chol_upper`` equal to the
        target covariance.

    Returns
    -------
    ndarray, shape (n_points, dim)
        ``mean + chol_upper.T @ xi_j`` for every node.  Each output coordinate
        is affine in ``mean`` and in the entries of ``chol_upper``.
    """
    mean = np.asarray(mean, dtype=float)
    chol_upper = np.asarray(chol_upper, dtype=float)
    if mean.shape != (rule.dim,) or chol_upper.shape != (rule.dim, rule.dim):
        raise DomainError(
            f"mean/chol shapes {mean.shape}/{chol_upper.shape} do not match rule dim {rule.dim}"
        )
    return mean[None, :] + rule.points @ chol_upper


def expect(
    rule: QuadratureRule,
    mean: np.ndarray,
    chol_upper: np.ndarray,
    f: Callable[[np.ndarray], float],
) -> float:
    """Approximate ``E[f(x)]`` for ``x ~ N(mean, chol_upper.T @ chol_upper)``.

    Raises
    ------
    EvaluationError
        If ``f`` returns a non-finite value at some node; the message names
        the offending node index.
    """
    points = transform(rule, mean, chol_upper)
    total = 0.0
    for j in range(rule.n_points):
        value = float(f(points[j]))
        if not np.isfinite(value):
            raise EvaluationError(f"integrand non-finite at sigma point {j}: {value}")
        total += rule.weights[j] * value
    return total
