"""Pairwise-joint Gaussian blocks and the quadrature-approximated bound.

The assumed posterior over ``x_{0:T}`` is represented as a chain of pairwise
joint Gaussians, one block per step ``k``:

    q_k(x_{k-1}, x_k) = N([x_{k-1}; x_k]; [mu_k; mu_bar_k], S_k.T @ S_k)

with the block upper-triangular square root

    S_k = [[A_k, B_k],
           [0,   C_k]],   A_k, C_k upper triangular with positive diagonals.

Adjacent blocks are tied by equality constraints forcing both to induce the
same marginal on the shared state.  The objective maximized over the packed
parameter vector is

    prior cross-entropy  +  sigma-point estimates of the expected transition
    and measurement log densities  -  E_q[log q]  (the last in closed form).

Every sigma point is an affine function of the block parameters, so exact
gradients and Hessians of the quadrature terms reduce to contractions of the
model's pointwise derivatives with a constant linear map; the objective
Hessian is exactly block diagonal, one dense block per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse

from .exceptions import ConstraintViolationError, DomainError, EvaluationError
from .models import Dataset, GaussianPrior, StateSpaceModel
from .quadrature import QuadratureRule, unscented_rule

__all__ = [
    "JointBlock",
    "GaussianMarginal",
    "BlockChain",
    "ChainLayout",
    "marginal_prev",
    "marginal_next",
    "block_from_joint",
    "constraints",
    "constraint_jacobian",
    "reconstruct_full_joint",
    "negative_entropy",
    "elbo",
    "elbo_gradient",
    "elbo_hessian",
    "BlockDiagonalHessian",
    "build_chain_problem",
    "random_feasible_chain",
    "default_rule",
]

LOG_2PI = float(np.log(2.0 * np.pi))


def default_rule(n_x: int) -> QuadratureRule:
    """The quadrature rule used throughout: third-order unscented on the 2 n_x joint."""
    return unscented_rule(2 * n_x, alpha=1.0, kappa=0.0)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointBlock:
    """One pairwise joint Gaussian, parametrized by means and square-root blocks."""

    mu: np.ndarray
    mu_bar: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.mu).size
        for name in ("mu", "mu_bar"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(n))
        for name in ("A", "B", "C"):
            mat = np.asarray(getattr(self, name), dtype=float).reshape(n, n)
            object.__setattr__(self, name, mat)

    @property
    def n_x(self) -> int:
        return self.mu.size

    @property
    def joint_mean(self) -> np.ndarray:
        return np.concatenate([self.mu, self.mu_bar])

    @property
    def chol_upper(self) -> np.ndarray:
        n = self.n_x
        out = np.zeros((2 * n, 2 * n))
        out[:n, :n] = np.triu(self.A)
        out[:n, n:] = self.B
        out[n:, n:] = np.triu(self.C)
        return out

    @property
    def joint_cov(self) -> np.ndarray:
        s = self.chol_upper
        return s.T @ s

    def diagonals_positive(self) -> bool:
        return bool(np.all(np.diag(self.A) > 0.0) and np.all(np.diag(self.C) > 0.0))


@dataclass(frozen=True)
class GaussianMarginal:
    """A Gaussian over a single state, stored as mean and covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DomainError("marginal mean/cov sizes differ")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(cov))):
            raise DomainError("marginal covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.size

    def chol_upper(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.cov).T
        except np.linalg.LinAlgError as exc:
            raise DomainError("marginal covariance is not positive definite") from exc


def marginal_prev(block: JointBlock) -> GaussianMarginal:
    """Marginal of the earlier state: N(mu, A.T A)."""
    a = np.triu(block.A)
    return GaussianMarginal(block.mu, a.T @ a)


def marginal_next(block: JointBlock) -> GaussianMarginal:
    """Marginal of the later state: N(mu_bar, B.T B + C.T C)."""
    c = np.triu(block.C)
    return GaussianMarginal(block.mu_bar, block.B.T @ block.B + c.T @ c)


def block_from_joint(mean_prev: np.ndarray, mean_next: np.ndarray, joint_cov: np.ndarray) -> JointBlock:
    """Factor a joint mean/covariance into the (A, B, C) square-root blocks."""
    mean_prev = np.asarray(mean_prev, dtype=float).reshape(-1)
    n = mean_prev.size
    joint_cov = np.asarray(joint_cov, dtype=float)
    p11 = joint_cov[:n, :n]
    p12 = joint_cov[:n, n:]
    p22 = joint_cov[n:, n:]
    try:
        a = np.linalg.cholesky(p11).T
    except np.linalg.LinAlgError as exc:
        raise DomainError("joint covariance has a non-PD leading block") from exc
    b = scipy.linalg.solve_triangular(a.T, p12, lower=True)
    schur = p22 - b.T @ b
    schur = 0.5 * (schur + schur.T)
    try:
        c = np.linalg.cholesky(schur).T
    except np.linalg.LinAlgError as exc:
        raise DomainError("joint covariance has a non-PD conditional block") from exc
    return JointBlock(mu=mean_prev, mu_bar=mean_next, A=a, B=b, C=c)


# ---------------------------------------------------------------------------
# Packed layout
# ---------------------------------------------------------------------------


class ChainLayout:
    """Index bookkeeping for the packed parameter vector.

    Per block the order is: mu, mu_bar, column-major upper triangle of A,
    column-major B, column-major upper triangle of C.
    """

    def __init__(self, n_x: int, T: int):
        if n_x < 1 or T < 1:
            raise DomainError("need n_x >= 1 and T >= 1")
        self.n_x = n_x
        self.T = T
        n = n_x
        self.tri_count = n * (n + 1) // 2
        self.block_size = 2 * n + n * (2 * n + 1)
        self.n_params = T * self.block_size
        # (row, col) of the upper triangle in column-major order
        pairs = [(r, s) for s in range(n) for r in range(s + 1)]
        self.tri_r = np.array([p[0] for p in pairs], dtype=int)
        self.tri_c = np.array([p[1] for p in pairs], dtype=int)
        self.tri_flat = self.tri_c * n + self.tri_r  # positions inside a col-major n*n block
        # (row, col) of a full matrix in column-major order
        self.full_r = np.tile(np.arange(n), n)
        self.full_c = np.repeat(np.arange(n), n)
        # (row, col) of the lower triangle in column-major order (vech)
        vpairs = [(i, j) for j in range(n) for i in range(j, n)]
        self.vech_i = np.array([p[0] for p in vpairs], dtype=int)
        self.vech_j = np.array([p[1] for p in vpairs], dtype=int)
        self.cons_group_size = n + self.tri_count
        # slices within one block
        self.sl_mu = slice(0, n)
        self.sl_mu_bar = slice(n, 2 * n)
        self.off_a = 2 * n
        self.off_b = 2 * n + self.tri_count
        self.off_c = 2 * n + self.tri_count + n * n
        diag_pos = np.array([i * (i + 3) // 2 for i in range(n)], dtype=int)
        self.a_diag = self.off_a + diag_pos
        self.c_diag = self.off_c + diag_pos

    def block_slice(self, k: int) -> slice:
        return slice(k * self.block_size, (k + 1) * self.block_size)

    def pack_block(self, block: JointBlock) -> np.ndarray:
        out = np.empty(self.block_size)
        out[self.sl_mu] = block.mu
        out[self.sl_mu_bar] = block.mu_bar
        out[self.off_a : self.off_b] = block.A[self.tri_r, self.tri_c]
        out[self.off_b : self.off_c] = block.B[self.full_r, self.full_c]
        out[self.off_c :] = block.C[self.tri_r, self.tri_c]
        return out

    def unpack_block(self, vec: np.ndarray) -> JointBlock:
        n = self.n_x
        a = np.zeros((n, n))
        b = np.zeros((n, n))
        c = np.zeros((n, n))
        a[self.tri_r, self.tri_c] = vec[self.off_a : self.off_b]
        b[self.full_r, self.full_c] = vec[self.off_b : self.off_c]
        c[self.tri_r, self.tri_c] = vec[self.off_c :]
        return JointBlock(mu=vec[self.sl_mu], mu_bar=vec[self.sl_mu_bar], A=a, B=b, C=c)

    def positive_indices(self) -> np.ndarray:
        """Flat indices of all A and C diagonal entries (must stay positive)."""
        per_block = np.concatenate([self.a_diag, self.c_diag])
        return np.concatenate([k * self.block_size + per_block for k in range(self.T)])

    def log_positive_indices(self) -> np.ndarray:
        """Flat indices of diagonals appearing in logarithms: A of block 1, C of all.

        The A diagonals of later blocks enter only through A.T A, so their sign
        is free; they are kept positive by re-signing rows instead of bounding.
        """
        idx = [self.a_diag]
        idx.extend(k * self.block_size + self.c_diag for k in range(self.T))
        return np.concatenate(idx)

    def canonicalize_signs(self, x: np.ndarray) -> np.ndarray:
        """Flip rows of A_k (k >= 2) with negative diagonals; value-preserving.

        Flipping the sign of a whole row of an upper-triangular factor leaves
        A.T A unchanged, so the objective and constraints are untouched.
        """
        x = np.array(x, dtype=float, copy=True)
        n = self.n_x
        for k in range(1, self.T):
            base = k * self.block_size
            for i in range(n):
                diag_pos = base + self.a_diag[i]
                if x[diag_pos] < 0.0:
                    row_mask = self.tri_r == i
                    cols = base + self.off_a + np.flatnonzero(row_mask)
                    x[cols] = -x[cols]
        return x


class BlockChain:
    """The sequence of pairwise blocks for steps 1..T, with pack/unpack."""

    def __init__(self, blocks: Sequence[JointBlock]):
        blocks = list(blocks)
        if not blocks:
            raise DomainError("a block chain needs at least one block")
        n = blocks[0].n_x
        if any(b.n_x != n for b in blocks):
            raise DomainError("all blocks must share the state dimension")
        self.blocks: List[JointBlock] = blocks
        self.layout = ChainLayout(n, len(blocks))

    @property
    def n_x(self) -> int:
        return self.layout.n_x

    @property
    def T(self) -> int:
        return self.layout.T

    def __len__(self) -> int:
        return self.T

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, k: int) -> JointBlock:
        return self.blocks[k]

    def pack(self) -> np.ndarray:
        return np.concatenate([self.layout.pack_block(b) for b in self.blocks])

    @classmethod
    def unpack(cls, vec: np.ndarray, n_x: int, T: int) -> "BlockChain":
        layout = ChainLayout(n_x, T)
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != layout.n_params:
            raise DomainError(f"packed vector has size {vec.size}, expected {layout.n_params}")
        return cls([layout.unpack_block(vec[layout.block_slice(k)]) for k in range(T)])


# ---------------------------------------------------------------------------
# Marginal-consistency constraints
# ---------------------------------------------------------------------------


def _vech(mat: np.ndarray, layout: ChainLayout) -> np.ndarray:
    return mat[layout.vech_i, layout.vech_j]


def constraints(chain: BlockChain) -> np.ndarray:
    """Stacked consistency residuals c_1..c_{T-1}; empty for T = 1.

    Group k stacks the mean gap ``mu_{k+1} - mu_bar_k`` and the half-vectorized
    gap between the next-marginal covariance of block k and the prev-marginal
    covariance of block k+1.
    """
    layout = chain.layout
    if chain.T == 1:
        return np.zeros(0)
    out = np.empty((chain.T - 1) * layout.cons_group_size)
    for g in range(chain.T - 1):
        left, right = chain.blocks[g], chain.blocks[g + 1]
        c_upper = np.triu(left.C)
        a_upper = np.triu(right.A)
        s_left = left.B.T @ left.B + c_upper.T @ c_upper
        s_right = a_upper.T @ a_upper
        row = slice(g * layout.cons_group_size, (g + 1) * layout.cons_group_size)
        out[row] = np.concatenate(
            [right.mu - left.mu_bar, _vech(s_left, layout) - _vech(s_right, layout)]
        )
    return out


def _vech_quadratic_jac(mat: np.ndarray, layout: ChainLayout) -> np.ndarray:
    """d vech(M.T M) / dM as (tri_count, n, n) indexed [row, r, s]."""
    n = layout.n_x
    t = layout.tri_count
    out = np.zeros((t, n, n))
    out[np.arange(t), :, layout.vech_i] += mat[:, layout.vech_j].T
    out[np.arange(t), :, layout.vech_j] += mat[:, layout.vech_i].T
    return out


def _constraint_groups(chain: BlockChain) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Exact Jacobian as per-group block pairs (D on block k, E on block k+1)."""
    layout = chain.layout
    n = layout.n_x
    t = layout.tri_count
    nb = layout.block_size
    groups = []
    for g in range(chain.T - 1):
        left, right = chain.blocks[g], chain.blocks[g + 1]
        d = np.zeros((layout.cons_group_size, nb))
        e = np.zeros((layout.cons_group_size, nb))
        d[np.arange(n), n + np.arange(n)] = -1.0  # -mu_bar_k
        e[np.arange(n), np.arange(n)] = 1.0  # +mu_{k+1}
        db = _vech_quadratic_jac(left.B, layout)
        d[n:, layout.off_b : layout.off_c] = db.transpose(0, 2, 1).reshape(t, n * n)
        dc = _vech_quadratic_jac(np.triu(left.C), layout)
        d[n:, layout.off_c :] = dc[:, layout.tri_r, layout.tri_c]
        da = _vech_quadratic_jac(np.triu(right.A), layout)
        e[n:, layout.off_a : layout.off_b] = -da[:, layout.tri_r, layout.tri_c]
        groups.append((d, e))
    return groups


def constraint_jacobian(chain: BlockChain) -> scipy.sparse.csr_matrix:
    """Sparse ((T-1) m_c, n_params) Jacobian of :func:`constraints`."""
    layout = chain.layout
    m = (chain.T - 1) * layout.cons_group_size
    mat = scipy.sparse.lil_matrix((m, layout.n_params))
    for g, (d, e) in enumerate(_constraint_groups(chain)):
        rows = slice(g * layout.cons_group_size, (g + 1) * layout.cons_group_size)
        mat[rows, layout.block_slice(g)] = d
        mat[rows, layout.block_slice(g + 1)] = e
    return mat.tocsr()


def _sym_from_vech_multipliers(lam_vech: np.ndarray, layout: ChainLayout) -> np.ndarray:
    """Multipliers on vech rows as the symmetric matrix driving d^2(lam.T c)."""
    n = layout.n_x
    theta = np.zeros((n, n))
    theta[layout.vech_i, layout.vech_j] = lam_vech
    return theta + theta.T


def _constraint_curvature(chain_or_layout, lam: np.ndarray) -> List[np.ndarray]:
    """Per-block Hessian of ``lam.T c`` (constant in the parameters given lam)."""
    layout = chain_or_layout if isinstance(chain_or_layout, ChainLayout) else chain_or_layout.layout
    n = layout.n_x
    nb = layout.block_size
    mc = layout.cons_group_size
    eye = np.eye(n)
    out = [np.zeros((nb, nb)) for _ in range(layout.T)]
    for g in range(layout.T - 1):
        lam_vech = lam[g * mc + n : (g + 1) * mc]
        sym = _sym_from_vech_multipliers(lam_vech, layout)
        kron_full = np.kron(sym, eye)
        kron_tri = kron_full[np.ix_(layout.tri_flat, layout.tri_flat)]
        blk = out[g]
        blk[layout.off_b : layout.off_c, layout.off_b : layout.off_c] += kron_full
        blk[layout.off_c :, layout.off_c :] += kron_tri
        out[g + 1][layout.off_a : layout.off_b, layout.off_a : layout.off_b] -= kron_tri
    return out


# ---------------------------------------------------------------------------
# Full-joint reconstruction and entropy
# ---------------------------------------------------------------------------


def reconstruct_full_joint(chain: BlockChain, tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """The unique Markov-consistent Gaussian over x_{0:T} matching all blocks.

    Cross-covariances beyond adjacent states follow from the chain property
    ``Cov(x_i, x_j) = Cov(x_i, x_m) Var(x_m)^{-1} Cov(x_m, x_j)`` applied through
    the intermediate states.  Requires the consistency constraints to hold.
    """
    resid = constraints(chain)
    if resid.size and np.max(np.abs(resid)) > tol:
        raise ConstraintViolationError(
            f"blocks are inconsistent: max constraint residual {np.max(np.abs(resid)):.3e}"
        )
    n = chain.n_x
    T = chain.T
    means = np.empty((T + 1) * n)
    means[:n] = chain.blocks[0].mu
    cov = np.zeros(((T + 1) * n, (T + 1) * n))

    def seg(i):
        return slice(i * n, (i + 1) * n)

    diag = [marginal_prev(chain.blocks[0]).cov]
    for k, block in enumerate(chain.blocks, start=1):
        means[seg(k)] = block.mu_bar
        diag.append(marginal_next(block).cov)
    for i in range(T + 1):
        cov[seg(i), seg(i)] = diag[i]
    for k, block in enumerate(chain.blocks):
        cross = np.triu(block.A).T @ block.B
        cov[seg(k), seg(k + 1)] = cross
        cov[seg(k + 1), seg(k)] = cross.T
    for gap in range(2, T + 1):
        for i in range(0, T + 1 - gap):
            mid = i + gap - 1
            prev_cross = cov[seg(i), seg(mid)]
            cross = prev_cross @ np.linalg.solve(diag[mid], cov[seg(mid), seg(mid + 1)])
            cov[seg(i), seg(i + gap)] = cross
            cov[seg(i + gap), seg(i)] = cross.T
    return means, cov


def negative_entropy(chain: BlockChain) -> float:
    """E_q[log q] of the implied full joint, in closed form.

    Equals minus the Gaussian differential entropy; the log-determinant
    telescopes into the log diagonals of the conditional factors C_k plus
    those of A_1.
    """
    _require_positive_diagonals(chain)
    n = chain.n_x
    T = chain.T
    log_diag = float(np.sum(np.log(np.diag(chain.blocks[0].A))))
    for block in chain.blocks:
        log_diag += float(np.sum(np.log(np.diag(block.C))))
    return -0.5 * (T + 1) * n * (LOG_2PI + 1.0) - log_diag


def _require_positive_diagonals(chain: BlockChain) -> None:
    for k, block in enumerate(chain.blocks):
        if not block.diagonals_positive():
            raise DomainError(f"block {k + 1} has a non-positive A or C diagonal")


# ---------------------------------------------------------------------------
# Objective evaluation (value / gradient / Hessian)
# ---------------------------------------------------------------------------


@dataclass
class BlockDiagonalHessian:
    """Symmetric block-diagonal matrix stored as its dense per-step blocks."""

    blocks: List[np.ndarray]

    def to_dense(self) -> np.ndarray:
        sizes = [b.shape[0] for b in self.blocks]
        total = sum(sizes)
        out = np.zeros((total, total))
        off = 0
        for b in self.blocks:
            out[off : off + b.shape[0], off : off + b.shape[0]] = b
            off += b.shape[0]
        return out


def _sigma_map(layout: ChainLayout, rule: QuadratureRule) -> np.ndarray:
    """Jacobian of every sigma point w.r.t. the block parameters; (n_pts, 2n, nb).

    Constant across blocks and iterations: each sigma point is
    ``joint_mean + S.T @ xi`` with S affine in the parameters.
    """
    n = layout.n_x
    nb = layout.block_size
    t = layout.tri_count
    pts = rule.points
    m = pts.shape[0]
    xa, xb = pts[:, :n], pts[:, n:]
    out = np.zeros((m, 2 * n, nb))
    out[:, np.arange(n), np.arange(n)] = 1.0
    out[:, n + np.arange(n), n + np.arange(n)] = 1.0
    out[:, layout.tri_c, layout.off_a + np.arange(t)] = xa[:, layout.tri_r]
    out[:, n + layout.full_c, layout.off_b + np.arange(n * n)] = xa[:, layout.full_r]
    out[:, n + layout.tri_c, layout.off_c + np.arange(t)] = xb[:, layout.tri_r]
    return out


class _WindowEvaluator:
    """Bound evaluation over a window of steps with a Gaussian head prior."""

    def __init__(
        self,
        model: StateSpaceModel,
        ys: np.ndarray,
        rule: QuadratureRule,
        prior: GaussianPrior,
        k_offset: int = 0,
    ):
        self.model = model
        self.ys = np.atleast_2d(np.asarray(ys, dtype=float))
        self.rule = rule
        self.prior = prior
        self.k_offset = int(k_offset)
        self.T = self.ys.shape[0]
        self.layout = ChainLayout(model.n_x, self.T)
        if rule.dim != 2 * model.n_x:
            raise DomainError("quadrature rule dimension must be 2 n_x")
        self.sigma_map = _sigma_map(self.layout, rule)
        chol = prior.chol_cov
        self.prior_inv = scipy.linalg.cho_solve((chol, False), np.eye(model.n_x))
        self.prior_logdet_half = float(np.sum(np.log(np.diag(chol))))
        n = model.n_x
        tri_same_row = self.layout.tri_r[:, None] == self.layout.tri_r[None, :]
        self._prior_hess_a = -self.prior_inv[np.ix_(self.layout.tri_c, self.layout.tri_c)] * tri_same_row

    # -- closed-form terms ---------------------------------------------------

    def _prior_term(self, block: JointBlock, order: int):
        n = self.layout.n_x
        a = np.triu(block.A)
        diff = self.prior.mean - block.mu
        z = scipy.linalg.solve_triangular(self.prior.chol_cov.T, diff, lower=True)
        value = (
            -0.5 * n * LOG_2PI
            - self.prior_logdet_half
            - 0.5 * float(np.einsum("ij,ji->", self.prior_inv, a.T @ a))
            - 0.5 * float(z @ z)
        )
        if order == 0:
            return value, None, None
        grad = np.zeros(self.layout.block_size)
        grad[self.layout.sl_mu] = self.prior_inv @ diff
        ga = -a @ self.prior_inv
        grad[self.layout.off_a : self.layout.off_b] = ga[self.layout.tri_r, self.layout.tri_c]
        if order == 1:
            return value, grad, None
        hess = np.zeros((self.layout.block_size, self.layout.block_size))
        hess[self.layout.sl_mu, self.layout.sl_mu] = -self.prior_inv
        hess[self.layout.off_a : self.layout.off_b, self.layout.off_a : self.layout.off_b] = self._prior_hess_a
        return value, grad, hess

    def _entropy_term(self, blocks: Sequence[JointBlock], order: int):
        """Contribution of minus E_q[log q]; returned per block on demand."""
        n = self.layout.n_x
        value = 0.5 * (self.T + 1) * n * (LOG_2PI + 1.0)
        grads = None
        hesses = None
        a_diag = np.diag(blocks[0].A)
        c_diags = [np.diag(b.C) for b in blocks]
        if np.any(a_diag <= 0.0) or any(np.any(d <= 0.0) for d in c_diags):
            raise EvaluationError("non-positive A or C diagonal in entropy term")
        value += float(np.sum(np.log(a_diag)))
        value += float(sum(np.sum(np.log(d)) for d in c_diags))
        if order >= 1:
            grads = [np.zeros(self.layout.block_size) for _ in blocks]
            grads[0][self.layout.a_diag] = 1.0 / a_diag
            for k, d in enumerate(c_diags):
                grads[k][self.layout.c_diag] = 1.0 / d
        if order >= 2:
            hesses = [np.zeros((self.layout.block_size, self.layout.block_size)) for _ in blocks]
            hesses[0][self.layout.a_diag, self.layout.a_diag] = -1.0 / a_diag**2
            for k, d in enumerate(c_diags):
                hesses[k][self.layout.c_diag, self.layout.c_diag] += -1.0 / d**2
        return value, grads, hesses

    # -- quadrature terms ------------------------------------------------------

    def _model_terms(self, blocks: Sequence[JointBlock], order: int):
        """Per-step model log densities and derivatives at the sigma points.

        Returns the summed value plus, by order, the stacked point gradients
        (T, n_pts, 2n) and Hessians (T, n_pts, 2n, 2n).
        """
        n = self.layout.n_x
        n_pts = self.rule.n_points
        w = self.rule.weights
        value = 0.0
        g_stack = np.empty((self.T, n_pts, 2 * n)) if order >= 1 else None
        h_stack = np.empty((self.T, n_pts, 2 * n, 2 * n)) if order >= 2 else None
        for k in range(1, self.T + 1):
            block = blocks[k - 1]
            k_abs = self.k_offset + k
            pts = block.joint_mean[None, :] + self.rule.points @ block.chol_upper
            x_prev, x_next = pts[:, :n], pts[:, n:]
            y = self.ys[k - 1]
            vals = self.model.transition_logpdf(x_prev, x_next, k_abs)
            vals = vals + self.model.measurement_logpdf(y, x_next, k_abs)
            if not np.all(np.isfinite(vals)):
                bad = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise EvaluationError(
                    f"model log density non-finite at sigma point {bad} of step {k_abs}"
                )
            value += float(w @ vals)
            if order >= 1:
                g_pts = self.model.transition_grad(x_prev, x_next, k_abs).copy()
                g_pts[:, n:] += self.model.measurement_grad(y, x_next, k_abs)
                g_stack[k - 1] = g_pts
            if order >= 2:
                h_pts = self.model.transition_hess(x_prev, x_next, k_abs).copy()
                h_pts[:, n:, n:] += self.model.measurement_hess(y, x_next, k_abs)
                h_stack[k - 1] = h_pts
        return value, g_stack, h_stack

    # -- assembled objective -----------------------------------------------------

    def evaluate(self, blocks: Sequence[JointBlock], order: int):
        """Value (order 0), plus flat gradient (1), plus Hessian blocks (2)."""
        value, e_grads, e_hesses = self._entropy_term(blocks, order)
        p_val, p_grad, p_hess = self._prior_term(blocks[0], order)
        q_val, g_stack, h_stack = self._model_terms(blocks, order)
        value += p_val + q_val
        if not np.isfinite(value):
            raise EvaluationError("objective evaluated to a non-finite value")
        if order == 0:
            return value, None, None
        w = self.rule.weights
        # one contraction through the constant sigma-point map for all steps
        q_grads = np.einsum("j,jap,kja->kp", w, self.sigma_map, g_stack, optimize=True)
        grad = np.empty(self.layout.n_params)
        for k in range(self.T):
            gb = q_grads[k] + e_grads[k]
            if k == 0:
                gb = gb + p_grad
            grad[self.layout.block_slice(k)] = gb
        if order == 1:
            return value, grad, None
        tmp = np.einsum("kjab,jbq->kjaq", h_stack, self.sigma_map, optimize=True)
        q_hess = np.einsum("j,jap,kjaq->kpq", w, self.sigma_map, tmp, optimize=True)
        hesses = []
        for k in range(self.T):
            hb = 0.5 * (q_hess[k] + q_hess[k].swapaxes(0, 1)) + e_hesses[k]
            if k == 0:
                hb = hb + p_hess
            hesses.append(hb)
        return value, grad, hesses


# ---------------------------------------------------------------------------
# Public objective API
# ---------------------------------------------------------------------------


def _validated_evaluator(model, data: Dataset, chain: BlockChain, rule: Optional[QuadratureRule]):
    if chain.T != data.T:
        raise DomainError(f"chain has {chain.T} blocks but data has {data.T} steps")
    if chain.n_x != model.n_x:
        raise DomainError("chain and model disagree on the state dimension")
    _require_positive_diagonals(chain)
    rule = rule if rule is not None else default_rule(model.n_x)
    return _WindowEvaluator(model, data.ys, rule, model.prior)


def elbo(model, data: Dataset, chain: BlockChain, rule: Optional[QuadratureRule] = None) -> float:
    """Quadrature-approximated evidence lower bound of the block chain."""
    return _validated_evaluator(model, data, chain, rule).evaluate(chain.blocks, 0)[0]


def elbo_gradient(model, data: Dataset, chain: BlockChain, rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """Exact gradient of :func:`elbo` in the packed parameter layout."""
    return _validated_evaluator(model, data, chain, rule).evaluate(chain.blocks, 1)[1]


def elbo_hessian(model, data: Dataset, chain: BlockChain, rule: Optional[QuadratureRule] = None) -> BlockDiagonalHessian:
    """Exact Hessian of :func:`elbo`; block diagonal with one block per step."""
    return BlockDiagonalHessian(_validated_evaluator(model, data, chain, rule).evaluate(chain.blocks, 2)[2])


# ---------------------------------------------------------------------------
# NLP problem assembly
# ---------------------------------------------------------------------------


def build_chain_problem(
    model,
    ys: np.ndarray,
    prior: GaussianPrior,
    rule: Optional[QuadratureRule] = None,
    k_offset: int = 0,
):
    """Package the windowed bound as an :class:`~varsmooth.nlp_solver.NlpProblem`.

    The window covers absolute steps ``k_offset + 1 .. k_offset + len(ys)``
    with the given Gaussian prior on the state entering the window.
    """
    from .nlp_solver import NlpProblem  # local import to avoid a cycle

    rule = rule if rule is not None else default_rule(model.n_x)
    ev = _WindowEvaluator(model, ys, rule, prior, k_offset=k_offset)
    layout = ev.layout

    def _chain(x):
        return BlockChain.unpack(x, layout.n_x, layout.T)

    def objective(x):
        try:
            return ev.evaluate(_chain(x).blocks, 0)[0]
        except DomainError as exc:
            raise EvaluationError(str(exc)) from exc

    def gradient(x):
        try:
            return ev.evaluate(_chain(x).blocks, 1)[1]
        except DomainError as exc:
            raise EvaluationError(str(exc)) from exc

    def hess_blocks(x):
        return ev.evaluate(_chain(x).blocks, 2)[2]

    def cons(x):
        return constraints(_chain(x))

    def jac_groups(x):
        return _constraint_groups(_chain(x))

    def lag_hess_blocks(x, lam):
        blocks = ev.evaluate(_chain(x).blocks, 2)[2]
        if lam.size:
            curv = _constraint_curvature(layout, lam)
            blocks = [h - c for h, c in zip(blocks, curv)]
        return blocks

    group_sizes = [layout.cons_group_size] * (layout.T - 1) + [0]
    return NlpProblem(
        n=layout.n_params,
        m=(layout.T - 1) * layout.cons_group_size,
        objective=objective,
        gradient=gradient,
        hess_blocks=hess_blocks,
        constraints=cons,
        jacobian_groups=jac_groups,
        lag_hess_blocks=lag_hess_blocks,
        block_sizes=[layout.block_size] * layout.T,
        group_sizes=group_sizes,
        positive_indices=layout.log_positive_indices(),
        canonicalize=layout.canonicalize_signs,
    )


# ---------------------------------------------------------------------------
# Chain construction helpers
# ---------------------------------------------------------------------------


def random_feasible_chain(
    rng: np.random.Generator,
    n_x: int,
    T: int,
    mean_scale: float = 3.0,
    spread: float = 1.0,
) -> BlockChain:
    """A random chain satisfying the consistency constraints by construction.

    Block k+1 reuses block k's next-state marginal as its prev-state marginal
    (mean copied, A set to the Cholesky factor of B.T B + C.T C).
    """

    def rand_upper():
        mat = np.triu(rng.normal(scale=0.3 * spread, size=(n_x, n_x)))
        mat[np.diag_indices(n_x)] = spread * (0.4 + rng.uniform(0.2, 1.0, size=n_x))
        return mat

    mu = rng.normal(scale=mean_scale, size=n_x)
    blocks = []
    a = rand_upper()
    for _ in range(T):
        b = rng.normal(scale=0.3 * spread, size=(n_x, n_x))
        c = rand_upper()
        mu_bar = rng.normal(scale=mean_scale, size=n_x)
        blocks.append(JointBlock(mu=mu, mu_bar=mu_bar, A=a, B=b, C=c))
        mu = mu_bar
        a = np.linalg.cholesky(b.T @ b + np.triu(c).T @ np.triu(c)).T
    return BlockChain(blocks)
