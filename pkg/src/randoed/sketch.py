"""Randomized subspace iteration and spectral post-processing.

Given a symmetric PSD operator A, sketch Y = A^q Omega with a Gaussian test
matrix, orthonormalize by thin Householder QR, project T = Q^T A Q, and
eigendecompose T.  The eigenvalues of T approximate those of A; everything
downstream (criterion values, gradients, error bounds) is a function of the
resulting factors.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError
from .linops import LinearOperator
from .rng import derived_seed, standard_normal_matrix


def sample_gaussian(n, ell, seed):
    """Deterministic n-by-ell standard Gaussian matrix.

    Philox4x64-10 counter PRNG keyed by the seed, Box-Muller transform,
    C-order fill: the same (n, ell, seed) gives a bitwise-identical matrix
    on any platform.
    """
    return standard_normal_matrix(n, ell, seed)


@dataclass(frozen=True)
class SketchConfig:
    """Target rank k, oversampling p >= 2, power steps q >= 1, seed.

    `reorth` inserts a stabilizing QR between power steps; off by default
    since q=1 is the common case.
    """

    k: int
    p: int = 2
    q: int = 1
    seed: int = 0
    reorth: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("target rank k must be >= 1")
        if self.p < 2:
            raise ContractError("oversampling p must be >= 2")
        if self.q < 1:
            raise ContractError("subspace iteration count q must be >= 1")

    @property
    def ell(self):
        return self.k + self.p


@dataclass
class LowRankFactors:
    """Output of subspace iteration plus its spectral form.

    Q (n x ell) has orthonormal columns, T = Q^T A Q is symmetric; after
    `factorize_T`: V = Q U with T = U diag(lambda_t) U^T, lambda_t descending
    and clamped at zero, and d = lambda_t / (1 + lambda_t).
    """

    q_basis: np.ndarray
    t_matrix: np.ndarray
    v: np.ndarray = None
    lambda_t: np.ndarray = None
    d: np.ndarray = None
    degraded: bool = False
    operator_applications: int = 0

    @property
    def ell(self):
        return self.q_basis.shape[1]


def factorize_T(factors):
    """Fill the spectral fields of `factors` in place (idempotent).

    Symmetrizes T, eigendecomposes with a dense symmetric solver, orders
    eigenvalues descending, clamps round-off negatives at zero, and forms
    V = Q U and d_i = lambda_i / (1 + lambda_i).
    """
    t_sym = 0.5 * (factors.t_matrix + factors.t_matrix.T)
    try:
        lam, u = np.linalg.eigh(t_sym)
    except np.linalg.LinAlgError as exc:
        scale = np.max(np.abs(t_sym)) if t_sym.size else 0.0
        raise NumericalError(f"eigendecomposition of T failed (max |T| = {scale:.3e})") from exc
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    u = u[:, order]
    lam = np.maximum(lam, 0.0)
    factors.t_matrix = t_sym
    factors.lambda_t = lam
    factors.v = factors.q_basis @ u
    factors.d = lam / (1.0 + lam)
    return factors


def _orthonormal_range(y, seed):
    """Thin QR with a rank-deficiency fallback.

    Dependent columns are replaced by fresh Gaussian draws and the basis is
    re-orthogonalized once; if still degenerate the basis is returned with
    fewer columns and flagged.
    """
    n, ell = y.shape
    q, r = np.linalg.qr(y)
    diag = np.abs(np.diag(r))
    tol = max(n, ell) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    good = diag > tol
    if good.all():
        return q, False

    keep = q[:, good]
    fresh = standard_normal_matrix(n, ell - keep.shape[1], derived_seed(seed, 3))
    if keep.shape[1]:
        fresh = fresh - keep @ (keep.T @ fresh)
    q2, r2 = np.linalg.qr(np.hstack([keep, fresh]) if keep.shape[1] else fresh)
    diag2 = np.abs(np.diag(r2))
    tol2 = max(n, ell) * np.finfo(float).eps * (diag2.max() if diag2.size else 0.0)
    good2 = diag2 > tol2
    if good2.all():
        return q2, False
    return q2[:, good2], True


def subspace_iteration(a_op, cfg):
    """Randomized subspace iteration on a symmetric PSD operator.

    Computes Y = A^q Omega, a thin QR Y = Q R, and T = Q^T (A Q); the
    operator is applied exactly (q+1)*ell times.  Returns fully factorized
    :class:`LowRankFactors`.

    Parameters
    ----------
    a_op : LinearOperator (square, symmetric PSD) or callable on blocks
    cfg : SketchConfig
    """
    if isinstance(a_op, LinearOperator):
        if a_op.rows != a_op.cols:
            raise ContractError("subspace iteration needs a square operator")
        n = a_op.cols
        apply_block = a_op.apply
    else:
        raise ContractError("a_op must be a LinearOperator")
    ell = cfg.ell
    if ell > n:
        raise ContractError(f"sketch size ell={ell} exceeds dimension n={n}")

    omega = sample_gaussian(n, ell, cfg.seed)
    applications = 0
    y = omega
    for step in range(cfg.q):
        y = apply_block(y)
        applications += ell
        if cfg.reorth and step < cfg.q - 1:
            y, _ = np.linalg.qr(y)
    q_basis, degraded = _orthonormal_range(y, cfg.seed)

    aq = apply_block(q_basis)
    applications += q_basis.shape[1]
    t_matrix = q_basis.T @ aq

    factors = LowRankFactors(q_basis=q_basis, t_matrix=t_matrix,
                             degraded=degraded,
                             operator_applications=applications)
    return factorize_T(factors)
