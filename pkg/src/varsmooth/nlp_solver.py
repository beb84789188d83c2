"""Equality-constrained Newton solver for chain-structured maximization.

The problems solved here maximize a smooth objective over a chain of
parameter blocks subject to equality constraints coupling adjacent blocks
only.  The objective Hessian is block diagonal and the constraint Jacobian
block bidiagonal, so one Newton-KKT system costs O(T) via banded
factorizations.

Step computation
----------------
Each iteration solves the regularized KKT system

    [H - delta I   J.T] [p ]   [-g]
    [J             0  ] [-y] = [-c],        multipliers = y,

after certifying that the reduced Hessian ``Z.T (H - delta I) Z`` on the
constraint null space is negative definite.  The certificate attempts a
banded Cholesky factorization of ``rho J.T J - (H - delta I)`` over a short
schedule of weights ``rho``: the penalized matrix agrees with
``H - delta I`` on the null space of ``J``, so a successful factorization
proves the reduced Hessian negative definite, and whenever the reduced
Hessian is negative definite a large enough ``rho`` makes the factorization
succeed.  When no ``rho`` certifies, ``delta`` doubles from 1e-8 and the
process repeats.

Globalization is a backtracking line search on the exact l1-penalty merit
with a sufficient-increase rule for the penalty weight, a trust radius
capping the step length, a second-order correction against curvature-induced
rejections of full steps, and a fraction-to-boundary clip keeping designated
coordinates strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .exceptions import EvaluationError, VarsmoothError

__all__ = ["NlpProblem", "SolveOptions", "SolveReport", "KktResult", "kkt_solve", "solve"]


class KktFailure(VarsmoothError):
    """The KKT system stayed singular through the whole regularization schedule."""


@dataclass
class NlpProblem:
    """Callbacks and structure of one chain-shaped equality-constrained program.

    ``jacobian_groups(x)`` returns one ``(D, E)`` pair per constraint group in
    block order: ``D`` acts on the group's block, ``E`` on the following block
    (``None`` for a group attached to a single block).  ``group_sizes[k]`` is
    the row count of the group following block ``k`` (zero when absent).
    ``lag_hess_blocks(x, lam)`` returns the Hessian blocks of
    ``objective - lam @ constraints``; when omitted the plain objective
    Hessian is used (exact for linear constraints).
    """

    n: int
    m: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hess_blocks: Callable[[np.ndarray], List[np.ndarray]]
    block_sizes: List[int]
    constraints: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacobian_groups: Optional[Callable[[np.ndarray], list]] = None
    lag_hess_blocks: Optional[Callable[[np.ndarray, np.ndarray], List[np.ndarray]]] = None
    group_sizes: Optional[List[int]] = None
    positive_indices: Optional[np.ndarray] = None
    # Optional re-parametrization applied to accepted iterates; must preserve
    # the objective and constraint values exactly (e.g. sign flips of
    # square-root factor rows).
    canonicalize: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.group_sizes is None:
            self.group_sizes = [0] * len(self.block_sizes)
        if self.m != sum(self.group_sizes):
            raise ValueError("group_sizes must sum to the constraint count m")
        if sum(self.block_sizes) != self.n:
            raise ValueError("block_sizes must sum to the variable count n")


@dataclass
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 500
    trust_init: float = 1e3
    trust_min: float = 1e-12
    armijo: float = 1e-4
    penalty_init: float = 10.0
    max_backtracks: int = 45
    max_step_attempts: int = 14
    soc: bool = True
    boundary_fraction: float = 0.995
    positive_floor: float = 1e-12
    delta_init: float = 1e-8
    delta_max: float = 1e14
    verbose: int = 0


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    status: str  # converged | max-iter | line-search-failure
    iterations: int
    stat_residual: float
    cons_residual: float
    multipliers: np.ndarray
    merit_history: List[Tuple[float, float, float]] = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == "converged"


class KktResult(NamedTuple):
    step: np.ndarray
    multipliers: np.ndarray
    delta: float
    rho: float


# ---------------------------------------------------------------------------
# Structure helpers
# ---------------------------------------------------------------------------


def _expand_groups(groups: Sequence, group_sizes: Sequence[int]) -> list:
    """One entry per block: the group following it, or None."""
    out = []
    it = iter(groups)
    for size in group_sizes:
        out.append(next(it) if size > 0 else None)
    return out


def _h_matvec(h_blocks, delta, v, block_sizes):
    out = np.empty_like(v)
    off = 0
    for h, nb in zip(h_blocks, block_sizes):
        seg = v[off : off + nb]
        out[off : off + nb] = h @ seg - delta * seg
        off += nb
    return out


def _j_matvec(groups, v, block_sizes, group_sizes):
    out = np.zeros(sum(group_sizes))
    x_off = np.concatenate([[0], np.cumsum(block_sizes)])
    r_off = 0
    for k, grp in enumerate(groups):
        if grp is None:
            continue
        d, e = grp
        seg = d @ v[x_off[k] : x_off[k + 1]]
        if e is not None:
            seg = seg + e @ v[x_off[k + 1] : x_off[k + 2]]
        out[r_off : r_off + d.shape[0]] = seg
        r_off += d.shape[0]
    return out


def _jt_matvec(groups, w, block_sizes, group_sizes):
    out = np.zeros(int(sum(block_sizes)))
    x_off = np.concatenate([[0], np.cumsum(block_sizes)])
    r_off = 0
    for k, grp in enumerate(groups):
        if grp is None:
            continue
        d, e = grp
        seg = w[r_off : r_off + d.shape[0]]
        out[x_off[k] : x_off[k + 1]] += d.T @ seg
        if e is not None:
            out[x_off[k + 1] : x_off[k + 2]] += e.T @ seg
        r_off += d.shape[0]
    return out


# ---------------------------------------------------------------------------
# Banded assembly
# ---------------------------------------------------------------------------


_GRID_CACHE: dict = {}


def _index_grids(rows: int, cols: int):
    key = (rows, cols)
    grids = _GRID_CACHE.get(key)
    if grids is None:
        di = np.arange(rows)[:, None]
        dj = np.arange(cols)[None, :]
        grids = (di - dj, np.broadcast_to(dj, (rows, cols)))
        _GRID_CACHE[key] = grids
    return grids


class _BandedBuilder:
    """Accumulates a banded matrix in the LAPACK ``ab`` layout.

    With ``upper == 0`` the builder stores the lower triangle only; callers
    must then add only entries with row >= column.  Within one call the
    target entries are distinct, so fancy-indexed accumulation is exact.
    """

    def __init__(self, size: int, lower: int, upper: int):
        self.size = size
        self.lower = lower
        self.upper = upper
        self.ab = np.zeros((lower + upper + 1, size))

    def add_block(self, i0: int, j0: int, block: np.ndarray) -> None:
        rows, cols = block.shape
        if rows == 0 or cols == 0:
            return
        diff, dj = _index_grids(rows, cols)
        self.ab[self.upper + i0 - j0 + diff, j0 + dj] += block

    def add_lower_block(self, i0: int, j0: int, block: np.ndarray) -> None:
        """Add only the entries on or below the main diagonal.

        Masked entries contribute zero; their (wrapped) band coordinates are
        in range because block extents never exceed the bandwidth.
        """
        rows, cols = block.shape
        diff, dj = _index_grids(rows, cols)
        keep = (diff + (i0 - j0)) >= 0
        self.ab[self.upper + i0 - j0 + diff, j0 + dj] += np.where(keep, block, 0.0)

def _assemble_kkt_uniform_chain(h_blocks, groups, nb, mc, T, delta):
    """Fast interleaved-KKT band assembly for the homogeneous chain layout.

    Columns repeat with period nb + mc, so every block family lands in the
    band through strided slice assignments.
    """
    period = nb + mc
    total = T * nb + (T - 1) * mc
    bw = period
    ab = np.zeros((2 * bw + 1, total))
    u = bw
    shifted = np.stack(h_blocks)
    shifted -= delta * np.eye(nb)[None]
    d_stack = np.stack([grp[0] for grp in groups[: T - 1]])
    e_stack = np.stack([grp[1] for grp in groups[: T - 1]])
    for j in range(nb):
        ab[u - j : u - j + nb, slice(j, total, period)] = shifted[:, :, j].T
        ab[u + nb - j : u + nb - j + mc, slice(j, (T - 1) * period, period)] = d_stack[:, :, j].T
        ab[u - mc - j : u - mc - j + mc, slice(period + j, total, period)] = e_stack[:, :, j].T
    for i in range(mc):
        cols = slice(nb + i, total, period)
        ab[u - nb - i : u - nb - i + nb, cols] = d_stack[:, i, :].T
        ab[u + mc - i : u + mc - i + nb, cols] = e_stack[:, i, :].T
    x_off = [k * period for k in range(T)]
    l_off = [k * period + nb if k < T - 1 else -1 for k in range(T)]
    return ab, x_off, l_off, bw


def _certificate_band_uniform(diag_stack, sub_stack, nb, T):
    """Lower-band assembly of the block-tridiagonal certificate matrix."""
    has_sub = sub_stack is not None and len(sub_stack)
    bw = 2 * nb - 1 if has_sub else nb - 1
    ab = np.zeros((bw + 1, T * nb))
    for j in range(nb):
        ab[0 : nb - j, slice(j, T * nb, nb)] = diag_stack[:, j:, j].T
        if has_sub:
            ab[nb - j : 2 * nb - j, slice(j, (T - 1) * nb, nb)] = sub_stack[:, :, j].T
    return ab


def _assemble_kkt(h_blocks, groups, block_sizes, group_sizes, delta):
    """Interleaved symmetric KKT band: [H - delta I, J.T; J, 0]."""
    total = int(sum(block_sizes) + sum(group_sizes))
    bw = 0
    x_off, l_off = [], []
    off = 0
    for k, nb in enumerate(block_sizes):
        x_off.append(off)
        off += nb
        l_off.append(off if group_sizes[k] > 0 else -1)
        off += group_sizes[k]
        bw = max(bw, nb + group_sizes[k])
    builder = _BandedBuilder(total, bw, bw)
    for k, (h, nb) in enumerate(zip(h_blocks, block_sizes)):
        builder.add_block(x_off[k], x_off[k], h - delta * np.eye(nb))
        grp = groups[k]
        if grp is None:
            continue
        d, e = grp
        builder.add_block(l_off[k], x_off[k], d)
        builder.add_block(x_off[k], l_off[k], d.T)
        if e is not None:
            builder.add_block(l_off[k], x_off[k + 1], e)
            builder.add_block(x_off[k + 1], l_off[k], e.T)
    return builder, x_off, l_off, bw


def _is_uniform_chain(block_sizes, group_sizes, groups) -> bool:
    """Homogeneous chain: equal blocks, a full equal-sized group between each pair."""
    if len(set(block_sizes)) != 1 or len(block_sizes) < 2:
        return False
    T = len(block_sizes)
    if group_sizes[-1] != 0 or len(set(group_sizes[: T - 1])) != 1 or group_sizes[0] == 0:
        return False
    return all(groups[k] is not None and groups[k][1] is not None for k in range(T - 1))


def _certify_reduced_negative_definite(h_blocks, groups, block_sizes, group_sizes, delta, rho) -> bool:
    """True if a banded Cholesky of ``rho J.T J - (H - delta I)`` succeeds."""
    n_blocks = len(block_sizes)
    if all(g is None for g in groups):
        for h, nb in zip(h_blocks, block_sizes):
            try:
                np.linalg.cholesky(delta * np.eye(nb) - h)
            except np.linalg.LinAlgError:
                return False
        return True
    diag = [delta * np.eye(nb) - h for h, nb in zip(h_blocks, block_sizes)]
    sub = [None] * n_blocks  # sub[k]: block at (k+1, k)
    for k, grp in enumerate(groups):
        if grp is None:
            continue
        d, e = grp
        diag[k] = diag[k] + rho * (d.T @ d)
        if e is not None:
            diag[k + 1] = diag[k + 1] + rho * (e.T @ e)
            sub[k] = rho * (e.T @ d)
    # cheap necessary condition first: every diagonal block must be PD
    if len(set(block_sizes)) == 1:
        try:
            np.linalg.cholesky(np.stack(diag))
        except np.linalg.LinAlgError:
            return False
        if all(s is not None for s in sub[: n_blocks - 1]) and (
            n_blocks == 1 or sub[n_blocks - 1] is None
        ):
            sub_stack = np.stack(sub[: n_blocks - 1]) if n_blocks > 1 else None
            ab = _certificate_band_uniform(np.stack(diag), sub_stack, block_sizes[0], n_blocks)
            try:
                scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
                return False
            return True
    bw = max(
        (block_sizes[k] + block_sizes[k + 1] - 1) if sub[k] is not None else block_sizes[k] - 1
        for k in range(n_blocks)
    )
    x_off = np.concatenate([[0], np.cumsum(block_sizes)])
    builder = _BandedBuilder(int(sum(block_sizes)), int(bw), 0)
    for k in range(n_blocks):
        builder.add_lower_block(x_off[k], x_off[k], diag[k])
        if sub[k] is not None:
            builder.add_block(x_off[k + 1], x_off[k], sub[k])
    try:
        scipy.linalg.cholesky_banded(builder.ab, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        return False
    return True


def _solve_certified(h_blocks, groups, block_sizes, group_sizes, grad, cons, delta):
    """Solve the certified KKT system; returns (step, multipliers)."""
    if sum(group_sizes) == 0:
        step = np.empty(int(sum(block_sizes)))
        off = 0
        factors = np.linalg.cholesky(delta * np.eye(block_sizes[0])[None] - np.stack(h_blocks)) if len(set(block_sizes)) == 1 else None
        for k, (h, nb) in enumerate(zip(h_blocks, block_sizes)):
            factor = factors[k] if factors is not None else np.linalg.cholesky(delta * np.eye(nb) - h)
            step[off : off + nb] = scipy.linalg.cho_solve((factor, True), grad[off : off + nb])
            off += nb
        return step, np.zeros(0)
    if _is_uniform_chain(block_sizes, group_sizes, groups):
        ab, x_off, l_off, bw = _assemble_kkt_uniform_chain(
            h_blocks, groups, block_sizes[0], group_sizes[0], len(block_sizes), delta
        )
        builder = None
    else:
        builder, x_off, l_off, bw = _assemble_kkt(h_blocks, groups, block_sizes, group_sizes, delta)
        ab = builder.ab
    rhs = np.zeros(int(sum(block_sizes)) + int(sum(group_sizes)))
    off = 0
    for k, nb in enumerate(block_sizes):
        rhs[x_off[k] : x_off[k] + nb] = -grad[off : off + nb]
        off += nb
    r_off = 0
    for k in range(len(block_sizes)):
        if group_sizes[k] > 0:
            rhs[l_off[k] : l_off[k] + group_sizes[k]] = -cons[r_off : r_off + group_sizes[k]]
            r_off += group_sizes[k]
    sol = scipy.linalg.solve_banded((bw, bw), ab, rhs, check_finite=False)
    step = np.concatenate([sol[x_off[k] : x_off[k] + nb] for k, nb in enumerate(block_sizes)])
    lam = -np.concatenate(
        [sol[l_off[k] : l_off[k] + group_sizes[k]] for k in range(len(block_sizes)) if group_sizes[k] > 0]
    ) if sum(group_sizes) else np.zeros(0)
    return step, lam


def _kkt_residual_ok(h_blocks, groups, block_sizes, group_sizes, step, lam, grad, cons, delta) -> bool:
    r_stat = _h_matvec(h_blocks, delta, step, block_sizes) + grad
    if sum(group_sizes):
        r_stat = r_stat - _jt_matvec(groups, lam, block_sizes, group_sizes)
        r_feas = _j_matvec(groups, step, block_sizes, group_sizes) + cons
    else:
        r_feas = np.zeros(0)
    scale = max(
        1.0,
        float(np.max(np.abs(grad), initial=0.0)),
        float(np.max(np.abs(cons), initial=0.0)),
        float(np.max(np.abs(step), initial=0.0)),
    )
    ok = float(np.max(np.abs(r_stat), initial=0.0)) <= 1e-6 * scale
    if r_feas.size:
        ok = ok and float(np.max(np.abs(r_feas), initial=0.0)) <= 1e-6 * scale
    return ok


def kkt_solve(
    hess_blocks: List[np.ndarray],
    jacobian_groups: Sequence,
    grad: np.ndarray,
    cons: np.ndarray,
    group_sizes: Optional[List[int]] = None,
    delta_hint: float = 0.0,
    rho_hint: Optional[float] = None,
    options: Optional[SolveOptions] = None,
) -> KktResult:
    """Newton-KKT maximization step with inertia correction.

    Returns the primal step, the new multiplier estimate and the
    regularization used.  Raises :class:`KktFailure` when the system stays
    singular or uncertifiable through the whole ``delta`` schedule.
    """
    opts = options or SolveOptions()
    block_sizes = [h.shape[0] for h in hess_blocks]
    if group_sizes is None:
        padded = list(jacobian_groups) + [None] * (len(block_sizes) - len(jacobian_groups))
        groups = padded[: len(block_sizes)]
        group_sizes = [g[0].shape[0] if g is not None else 0 for g in groups]
    else:
        groups = _expand_groups(jacobian_groups, group_sizes)
    grad = np.asarray(grad, dtype=float)
    cons = np.asarray(cons, dtype=float)
    scale = max(1.0, max(float(np.max(np.abs(h), initial=0.0)) for h in hess_blocks))
    rho_base = rho_hint if rho_hint is not None else 1e2 * scale
    m = int(sum(group_sizes))

    delta = float(delta_hint)
    while delta <= opts.delta_max * scale:
        certified = False
        rho_used = 0.0
        if m == 0:
            certified = _certify_reduced_negative_definite(
                hess_blocks, groups, block_sizes, group_sizes, delta, 0.0
            )
        else:
            for rho in (rho_base, 1e2 * rho_base, 1e4 * rho_base):
                if _certify_reduced_negative_definite(
                    hess_blocks, groups, block_sizes, group_sizes, delta, rho
                ):
                    certified = True
                    rho_used = rho
                    break
        if certified:
            try:
                step, lam = _solve_certified(
                    hess_blocks, groups, block_sizes, group_sizes, grad, cons, delta
                )
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
                step = None
            if (
                step is not None
                and np.all(np.isfinite(step))
                and _kkt_residual_ok(
                    hess_blocks, groups, block_sizes, group_sizes, step, lam, grad, cons, delta
                )
            ):
                return KktResult(step=step, multipliers=lam, delta=delta, rho=rho_used)
        delta = opts.delta_init if delta < opts.delta_init else 2.0 * delta
    raise KktFailure(f"KKT system singular after regularization up to delta={delta:.1e}")


# ---------------------------------------------------------------------------
# Multiplier estimation
# ---------------------------------------------------------------------------


def _least_squares_multipliers(groups, grad, block_sizes, group_sizes):
    """lam minimizing ||grad - J.T lam|| via banded normal equations."""
    m = int(sum(group_sizes))
    if m == 0:
        return np.zeros(0)
    offsets = []
    off = 0
    for size in group_sizes:
        offsets.append(off)
        off += size
    bw = max(s - 1 for s in group_sizes if s > 0)
    n_blocks = len(block_sizes)
    for k in range(n_blocks - 1):
        coupled = (
            groups[k] is not None
            and groups[k][1] is not None
            and k + 1 < n_blocks
            and groups[k + 1] is not None
        )
        if coupled:
            bw = max(bw, group_sizes[k] + group_sizes[k + 1] - 1)
    builder = _BandedBuilder(m, int(bw), 0)
    for k, grp in enumerate(groups):
        if grp is None:
            continue
        d, e = grp
        s = d @ d.T
        if e is not None:
            s = s + e @ e.T
        s = s + 1e-12 * max(1.0, float(np.trace(s))) * np.eye(s.shape[0])
        builder.add_lower_block(offsets[k], offsets[k], s)
        if e is not None and k + 1 < n_blocks and groups[k + 1] is not None:
            builder.add_block(offsets[k + 1], offsets[k], groups[k + 1][0] @ e.T)
    rhs = _j_matvec(groups, grad, block_sizes, group_sizes)
    try:
        factor = scipy.linalg.cholesky_banded(builder.ab, lower=True, check_finite=False)
        return scipy.linalg.cho_solve_banded((factor, True), rhs, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
        return np.zeros(m)


# ---------------------------------------------------------------------------
# Main solve loop
# ---------------------------------------------------------------------------


def _boundary_alpha(x, step, idx, fraction, floor):
    """Largest alpha <= 1 keeping x[idx] + alpha * step[idx] above the shrink floor."""
    if idx is None or len(idx) == 0:
        return 1.0
    xi = x[idx]
    pi = step[idx]
    lower = np.maximum(floor, (1.0 - fraction) * xi)
    shrink = pi < 0.0
    if not np.any(shrink):
        return 1.0
    ratios = (xi[shrink] - lower[shrink]) / (-pi[shrink])
    return float(min(1.0, float(np.min(ratios))))


def solve(problem: NlpProblem, x0: np.ndarray, options: Optional[SolveOptions] = None) -> SolveReport:
    """Maximize the problem objective subject to its equality constraints.

    The initial point need not satisfy the constraints.  The report carries
    the last iterate even on non-convergence; ``status == "converged"``
    guarantees both the Lagrangian stationarity and the constraint violation
    are at most ``options.tol`` in the infinity norm.
    """
    opts = options or SolveOptions()
    x = np.asarray(x0, dtype=float).copy()
    if x.size != problem.n:
        raise ValueError(f"x0 has size {x.size}, expected {problem.n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    if problem.canonicalize is not None:
        x = problem.canonicalize(x)
    pos_idx = problem.positive_indices
    if pos_idx is not None and len(pos_idx):
        x[pos_idx] = np.maximum(x[pos_idx], 1e-8)

    has_cons = problem.m > 0

    def eval_fc(xv):
        f_val = float(problem.objective(xv))
        c_val = problem.constraints(xv) if has_cons else np.zeros(0)
        if not np.isfinite(f_val) or not np.all(np.isfinite(c_val)):
            raise EvaluationError("non-finite objective or constraints")
        return f_val, c_val

    def stat_residual(g_vec, grp, lam_vec):
        if has_cons:
            return float(
                np.max(np.abs(g_vec - _jt_matvec(grp, lam_vec, problem.block_sizes, problem.group_sizes)))
            )
        return float(np.max(np.abs(g_vec)))

    f, c = eval_fc(x)  # a failure at the initial point is the caller's problem
    g = problem.gradient(x)
    groups_raw = problem.jacobian_groups(x) if has_cons else []
    groups = _expand_groups(groups_raw, problem.group_sizes)
    lam = _least_squares_multipliers(groups, g, problem.block_sizes, problem.group_sizes)

    nu = opts.penalty_init
    radius = opts.trust_init
    delta_hint = 0.0
    rho_hint = None
    merit_history: List[Tuple[float, float, float]] = []
    status = "max-iter"
    message = ""
    iterations = 0
    lag_hess = problem.lag_hess_blocks or (lambda xv, lv: problem.hess_blocks(xv))

    for _ in range(opts.max_iter):
        stat_res = stat_residual(g, groups, lam)
        cons_res = float(np.max(np.abs(c), initial=0.0))
        if stat_res <= opts.tol and cons_res <= opts.tol:
            status = "converged"
            break

        h_blocks = lag_hess(x, lam)
        # soft reset so one hard stretch does not pin the penalty high forever
        if has_cons:
            nu = min(nu, max(opts.penalty_init, 2.0 * (float(np.max(np.abs(lam), initial=0.0)) + 1.0)))
        try:
            step, lam_try, delta_try, rho_used = kkt_solve(
                h_blocks,
                groups_raw,
                g,
                c,
                group_sizes=problem.group_sizes,
                delta_hint=delta_hint,
                rho_hint=rho_hint,
                options=opts,
            )
        except KktFailure as exc:
            status = "line-search-failure"
            message = str(exc)
            break
        if has_cons and rho_used > 0.0:
            rho_hint = rho_used
        c_l1 = float(np.sum(np.abs(c)))

        accepted = False
        tried_soc = False
        failure_reason = "line search could not find an acceptable step"
        x_new = f_new = c_new = None
        alpha = 0.0
        alpha_cap = 1.0
        step_norm = 0.0
        for _attempt in range(opts.max_step_attempts):
            g_dot_p = float(g @ step)
            if has_cons:
                needed = float(np.max(np.abs(lam_try), initial=0.0)) + 1.0
                if c_l1 > 0.0:
                    needed = max(needed, -g_dot_p / c_l1 + 1.0)
                if nu < needed:
                    nu = max(needed, 2.0 * nu)
            # minimization merit phi = -f + nu ||c||_1; directional derivative at 0
            descent = -g_dot_p - nu * c_l1
            phi0 = -f + nu * c_l1
            if not descent < 0.0:
                failure_reason = f"merit directional derivative {descent:.2e} is not negative"
                break
            step_norm = float(np.linalg.norm(step))
            alpha_cap = min(
                1.0,
                radius / step_norm if step_norm > 0 else 1.0,
                _boundary_alpha(x, step, pos_idx, opts.boundary_fraction, opts.positive_floor),
            )
            alpha = alpha_cap
            # a few plain backtracks before bending the step itself
            for _bt in range(3):
                x_trial = x + alpha * step
                try:
                    f_t, c_t = eval_fc(x_trial)
                except EvaluationError:
                    alpha *= 0.5
                    continue
                phi_t = -f_t + nu * float(np.sum(np.abs(c_t)))
                if phi_t <= phi0 + opts.armijo * alpha * descent:
                    x_new, f_new, c_new = x_trial, f_t, c_t
                    accepted = True
                    break
                if (
                    abs(descent) <= 1e-11 * max(1.0, abs(phi0))
                    and step_norm <= 1e-4 * (1.0 + float(np.linalg.norm(x)))
                ):
                    # predicted merit change below floating-point resolution:
                    # take the tiny Newton step so the residual keeps contracting
                    x_new, f_new, c_new = x_trial, f_t, c_t
                    accepted = True
                    break
                if (not tried_soc) and opts.soc and has_cons and alpha == alpha_cap and alpha > 0.5:
                    # feasibility-restoring correction against the Maratos effect
                    tried_soc = True
                    soc_point = None
                    try:
                        corr = kkt_solve(
                            h_blocks,
                            groups_raw,
                            np.zeros_like(g),
                            c_t,
                            group_sizes=problem.group_sizes,
                            delta_hint=max(delta_try, opts.delta_init),
                            rho_hint=rho_hint,
                            options=opts,
                        ).step
                        soc_point = x_trial + corr
                        if pos_idx is not None and len(pos_idx) and np.any(
                            soc_point[pos_idx] < opts.positive_floor
                        ):
                            soc_point = None
                    except KktFailure:
                        soc_point = None
                    if soc_point is not None:
                        try:
                            f_s, c_s = eval_fc(soc_point)
                            phi_s = -f_s + nu * float(np.sum(np.abs(c_s)))
                            if phi_s <= phi0 + opts.armijo * alpha * descent:
                                x_new, f_new, c_new = soc_point, f_s, c_s
                                accepted = True
                                break
                        except EvaluationError:
                            pass
                alpha *= 0.5
            if accepted:
                break
            # rejected: bend the step by increasing the curvature regularization
            # and re-solving, rather than creeping along a bad direction
            delta_try = max(opts.delta_init, 6.0 * max(delta_try, opts.delta_init / 6.0))
            try:
                step, lam_try, delta_try, _rho = kkt_solve(
                    h_blocks,
                    groups_raw,
                    g,
                    c,
                    group_sizes=problem.group_sizes,
                    delta_hint=delta_try,
                    rho_hint=rho_hint,
                    options=opts,
                )
            except KktFailure as exc:
                failure_reason = str(exc)
                break
        if opts.verbose:
            print(
                f"[solve] it={iterations} f={f:.6e} stat={stat_res:.2e} cons={cons_res:.2e} "
                f"delta={delta_try:.1e} nu={nu:.2f} alpha={alpha:.2e} |p|={step_norm:.2e} "
                f"accepted={accepted}"
            )
        if not accepted:
            status = "line-search-failure"
            message = failure_reason
            break

        delta_hint = 0.0 if delta_try <= opts.delta_init else delta_try / 4.0
        phi_new = -f_new + nu * float(np.sum(np.abs(c_new)))
        merit_history.append((phi0, phi_new, nu))
        if alpha >= 0.99 * alpha_cap and step_norm >= 0.5 * radius:
            radius = max(radius, 2.0 * alpha * step_norm)
        elif alpha < 0.26 * alpha_cap:
            radius = max(opts.trust_min * 10, alpha * step_norm * 2.0)
        x, f, c = x_new, f_new, c_new
        if problem.canonicalize is not None:
            x = problem.canonicalize(x)
        lam = lam_try
        g = problem.gradient(x)
        groups_raw = problem.jacobian_groups(x) if has_cons else []
        groups = _expand_groups(groups_raw, problem.group_sizes)
        iterations += 1

    stat_res = stat_residual(g, groups, lam)
    cons_res = float(np.max(np.abs(c), initial=0.0))
    if status == "max-iter":
        message = message or (
            f"iteration limit {opts.max_iter} reached: stationarity {stat_res:.2e}, "
            f"feasibility {cons_res:.2e}"
        )
    return SolveReport(
        x=x,
        objective=f,
        status=status,
        iterations=iterations,
        stat_residual=stat_res,
        cons_residual=cons_res,
        multipliers=lam,
        merit_history=merit_history,
        message=message,
    )
