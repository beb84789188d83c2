"""Variational filtering and smoothing built on the block chain and solver.

Filtering solves one unconstrained single-step problem per measurement,
seeded with a sigma-point predicted joint.  Smoothing solves the full
constrained problem over all steps, seeded either with the joint
distributions produced by a filtering pass or directly from the observed
measurements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .exceptions import DomainError
from .models import Dataset, GaussianPrior, StateSpaceModel
from .nlp_solver import SolveOptions, SolveReport, solve
from .quadrature import QuadratureRule, transform, unscented_rule
from .vi_core import (
    BlockChain,
    GaussianMarginal,
    JointBlock,
    block_from_joint,
    build_chain_problem,
    marginal_next,
    marginal_prev,
)

__all__ = [
    "FilterStepResult",
    "FilterResult",
    "SmoothResult",
    "init_filter_block",
    "vi_filter_step",
    "vi_filter",
    "init_smoother_from_filter",
    "init_smoother_from_unscented",
    "init_smoother_from_measurements",
    "vi_smooth",
    "is_diverged",
]


@dataclass
class FilterStepResult:
    marginal: GaussianMarginal
    block: JointBlock
    report: SolveReport


@dataclass
class FilterResult:
    marginals: List[GaussianMarginal]  # steps 1..T
    blocks: List[JointBlock]
    reports: List[SolveReport]

    @property
    def step_objectives(self) -> np.ndarray:
        """Final per-step bound values; their sum tracks the data log evidence."""
        return np.array([r.objective for r in self.reports])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iterations for r in self.reports])

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.reports)


@dataclass
class SmoothResult:
    chain: BlockChain
    report: SolveReport

    @property
    def marginals(self) -> List[GaussianMarginal]:
        """Smoothed marginals for steps 0..T."""
        out = [marginal_prev(self.chain.blocks[0])]
        out.extend(marginal_next(b) for b in self.chain.blocks)
        return out


def _prior_from_marginal(marginal: GaussianMarginal) -> GaussianPrior:
    return GaussianPrior(mean=marginal.mean, chol_cov=marginal.chol_upper())


def init_filter_block(
    model: StateSpaceModel,
    prior: GaussianMarginal,
    rule: Optional[QuadratureRule] = None,
    k: int = 1,
) -> JointBlock:
    """Sigma-point predicted joint of (previous state, next state).

    Propagates the prior's sigma points through the transition mean and adds
    the process noise on the next-state diagonal; for linear dynamics this is
    the exact one-step prediction joint.
    """
    rule = rule if rule is not None else unscented_rule(model.n_x)
    pts = transform(rule, prior.mean, prior.chol_upper())
    fpts = model.transition_mean(pts, k)
    w = rule.weights
    mean_next = w @ fpts
    dev_f = fpts - mean_next
    dev_p = pts - prior.mean
    n = model.n_x
    joint = np.empty((2 * n, 2 * n))
    joint[:n, :n] = prior.cov
    joint[:n, n:] = np.einsum("j,ja,jb->ab", w, dev_p, dev_f)
    joint[n:, :n] = joint[:n, n:].T
    joint[n:, n:] = np.einsum("j,ja,jb->ab", w, dev_f, dev_f) + model.Q
    return block_from_joint(prior.mean, mean_next, joint)


def vi_filter_step(
    model: StateSpaceModel,
    prior: GaussianMarginal,
    y: np.ndarray,
    k: int = 1,
    rule: Optional[QuadratureRule] = None,
    options: Optional[SolveOptions] = None,
    init_block: Optional[JointBlock] = None,
) -> FilterStepResult:
    """One measurement update as an unconstrained single-step problem.

    Returns the next-state marginal of the solved joint block together with
    the block itself and the solver report (the best iterate is returned even
    on non-convergence).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if init_block is None:
        init_block = init_filter_block(model, prior, k=k)
    problem = build_chain_problem(
        model, y[None, :], _prior_from_marginal(prior), rule=rule, k_offset=k - 1
    )
    report = solve(problem, BlockChain([init_block]).pack(), options)
    block = BlockChain.unpack(report.x, model.n_x, 1).blocks[0]
    return FilterStepResult(marginal=marginal_next(block), block=block, report=report)


def vi_filter(
    model: StateSpaceModel,
    data: Dataset,
    rule: Optional[QuadratureRule] = None,
    options: Optional[SolveOptions] = None,
) -> FilterResult:
    """Sequential filtering: one single-step solve per measurement, O(T) total."""
    prior = GaussianMarginal(model.prior.mean, model.prior.cov)
    marginals: List[GaussianMarginal] = []
    blocks: List[JointBlock] = []
    reports: List[SolveReport] = []
    for k in range(1, data.T + 1):
        step = vi_filter_step(model, prior, data.ys[k - 1], k=k, rule=rule, options=options)
        marginals.append(step.marginal)
        blocks.append(step.block)
        reports.append(step.report)
        prior = step.marginal
    return FilterResult(marginals=marginals, blocks=blocks, reports=reports)


def init_smoother_from_filter(
    model: StateSpaceModel,
    data: Dataset,
    rule: Optional[QuadratureRule] = None,
    options: Optional[SolveOptions] = None,
) -> BlockChain:
    """Initialize the smoother with the joint blocks of a filtering pass."""
    return BlockChain(vi_filter(model, data, rule=rule, options=options).blocks)


def init_smoother_from_unscented(model: StateSpaceModel, data: Dataset) -> BlockChain:
    """Initialize the smoother from an unscented RTS warm start.

    Useful on multimodal problems where a filtering pass may commit to a poor
    mode that the backward unscented pass escapes.
    """
    from .baselines import urtss_smooth  # local import: baselines does not import us

    sm = urtss_smooth(model, data)
    n = model.n_x
    blocks = []
    for k in range(1, data.T + 1):
        joint = np.empty((2 * n, 2 * n))
        joint[:n, :n] = sm.covs[k - 1]
        joint[:n, n:] = sm.cross_covs[k - 1]
        joint[n:, :n] = sm.cross_covs[k - 1].T
        joint[n:, n:] = sm.covs[k]
        blocks.append(block_from_joint(sm.means[k - 1], sm.means[k], joint))
    return BlockChain(blocks)


def init_smoother_from_measurements(
    data: Dataset,
    n_x: int,
    state_indices: Sequence[int],
    measurement_indices: Optional[Sequence[int]] = None,
    cov_scale: float = 0.01,
) -> BlockChain:
    """Initialize block means from raw measurements, ignoring the dynamics.

    Measured state coordinates take the observed values (the first block's
    earlier state reuses the first measurement, there being no measurement of
    the initial state); unmeasured coordinates start at zero.  Every joint
    covariance is ``cov_scale**2 I``.
    """
    state_idx = np.asarray(state_indices, dtype=int)
    meas_idx = (
        np.arange(state_idx.size) if measurement_indices is None else np.asarray(measurement_indices, int)
    )
    if meas_idx.size != state_idx.size:
        raise DomainError("state and measurement index lists must have equal length")

    def state_guess(k: int) -> np.ndarray:
        out = np.zeros(n_x)
        out[state_idx] = data.ys[k - 1][meas_idx]
        return out

    eye = cov_scale * np.eye(n_x)
    zero = np.zeros((n_x, n_x))
    blocks = []
    for k in range(1, data.T + 1):
        mu = state_guess(max(k - 1, 1))
        mu_bar = state_guess(k)
        blocks.append(JointBlock(mu=mu, mu_bar=mu_bar, A=eye, B=zero, C=eye))
    return BlockChain(blocks)


def vi_smooth(
    model: StateSpaceModel,
    data: Dataset,
    init: Union[str, BlockChain] = "filter",
    rule: Optional[QuadratureRule] = None,
    options: Optional[SolveOptions] = None,
) -> SmoothResult:
    """Solve the constrained smoothing problem over all pairwise blocks.

    ``init`` is either a ready :class:`BlockChain` or the name of a built-in
    strategy: ``"filter"`` (a filtering pass; the default), ``"urtss"`` (an
    unscented warm start) or ``"auto"`` (solve from both and keep the higher
    final bound; useful on multimodal problems where one strategy may commit
    to a poor mode).  The solver does not require the initial chain to
    satisfy the consistency constraints.
    """
    if isinstance(init, BlockChain):
        candidates = [init]
    elif init == "filter":
        candidates = [init_smoother_from_filter(model, data, rule=rule, options=options)]
    elif init == "urtss":
        candidates = [init_smoother_from_unscented(model, data)]
    elif init == "auto":
        candidates = [init_smoother_from_filter(model, data, rule=rule, options=options)]
        try:
            candidates.append(init_smoother_from_unscented(model, data))
        except (DomainError, np.linalg.LinAlgError):
            pass  # warm start unavailable (e.g. non-PD unscented joints)
    else:
        raise DomainError(f"unknown smoother initialization {init!r}")
    problem = build_chain_problem(model, data.ys, model.prior, rule=rule)
    best = None
    for chain0 in candidates:
        if chain0.T != data.T or chain0.n_x != model.n_x:
            raise DomainError("initial chain shape does not match the data")
        report = solve(problem, chain0.pack(), options)
        if best is None or (report.converged, report.objective) > (
            best.converged,
            best.objective,
        ):
            best = report
    chain = BlockChain.unpack(best.x, model.n_x, data.T)
    return SmoothResult(chain=chain, report=best)


def is_diverged(
    marginals: Sequence[GaussianMarginal],
    reports: Optional[Sequence[SolveReport]] = None,
    cov_eig_limit: float = 1e8,
    mean_norm_limit: float = 1e6,
) -> bool:
    """Fixed divergence criterion used by the robustness experiments.

    A run is diverged if any solver report failed to converge, any posterior
    covariance eigenvalue exceeds ``cov_eig_limit``, or any posterior mean
    norm exceeds ``mean_norm_limit``.
    """
    if reports is not None and any(not r.converged for r in reports):
        return True
    for marg in marginals:
        if float(np.linalg.norm(marg.mean)) > mean_norm_limit:
            return True
        if float(np.max(np.linalg.eigvalsh(marg.cov))) > cov_eig_limit:
            return True
    return False
