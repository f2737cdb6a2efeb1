"""Matrix-free linear operators with adjoints and dense materialization.

Every map in the package (forward model, prior square root, preconditioned
forward operator, data-misfit Hessian) is a :class:`LinearOperator`: it knows
its dimensions, applies itself and its adjoint to vectors or to blocks of
column vectors, and accumulates a PDE-solve counter.  Adjoints are taken with
respect to a diagonal inner product on the domain (`domain_weight`), which is
the lumped-mass inner product for fields on the grid and Euclidean otherwise.
"""

import threading
from typing import NamedTuple

import numpy as np

from .errors import CapExceededError, ContractError, SolverError
from .rng import derived_seed, standard_normal_matrix

DENSE_CAP = 2**26  # default cap on rows*cols for dense materialization


class SolveCounter:
    """Monotone, thread-safe counter of forward-model-equivalent solves."""

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def add(self, amount):
        if amount < 0:
            raise ValueError("solve counter cannot decrease")
        with self._lock:
            self._value += int(amount)

    @property
    def value(self):
        return self._value


def _as_block(x, length, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != length:
            raise ContractError(f"{what}: expected length {length}, got {x.shape[0]}")
        return x[:, None], True
    if x.ndim == 2:
        if x.shape[0] != length:
            raise ContractError(f"{what}: expected leading dimension {length}, got {x.shape[0]}")
        return x, False
    raise ContractError(f"{what}: expected a vector or a matrix of columns")


class LinearOperator:
    """Base class; subclasses implement `_apply` / `_apply_adjoint` on blocks.

    Parameters
    ----------
    rows, cols : int
        Output and input dimensions.
    domain_weight : array or None
        Diagonal of the domain inner-product weight W (None = Euclidean).
        The adjoint satisfies <A x, y> = <x, A* y>_W.
    counter : SolveCounter or None
        Where PDE-solve costs accumulate; shared between related operators.
    apply_cost, adjoint_cost : int
        PDE solves charged per applied column in each direction.
    """

    def __init__(self, rows, cols, domain_weight=None, counter=None,
                 apply_cost=0, adjoint_cost=None):
        if rows < 1 or cols < 1:
            raise ContractError("operator dimensions must be positive")
        self.rows = int(rows)
        self.cols = int(cols)
        self.domain_weight = None if domain_weight is None else np.asarray(domain_weight, float)
        self.counter = counter if counter is not None else SolveCounter()
        self.apply_cost = apply_cost
        self.adjoint_cost = apply_cost if adjoint_cost is None else adjoint_cost

    @property
    def solve_count(self):
        return self.counter.value

    def apply(self, x):
        block, single = _as_block(x, self.cols, type(self).__name__ + ".apply")
        self.counter.add(self.apply_cost * block.shape[1])
        out = self._apply(block)
        if out.shape != (self.rows, block.shape[1]):
            raise ContractError(f"apply produced shape {out.shape}, expected {(self.rows, block.shape[1])}")
        return out[:, 0] if single else out

    def apply_adjoint(self, y):
        block, single = _as_block(y, self.rows, type(self).__name__ + ".apply_adjoint")
        self.counter.add(self.adjoint_cost * block.shape[1])
        out = self._apply_adjoint(block)
        if out.shape != (self.cols, block.shape[1]):
            raise ContractError(f"apply_adjoint produced shape {out.shape}, expected {(self.cols, block.shape[1])}")
        return out[:, 0] if single else out

    def _apply(self, X):
        raise NotImplementedError

    def _apply_adjoint(self, Y):
        raise NotImplementedError


class IdentityOperator(LinearOperator):
    def __init__(self, n):
        super().__init__(n, n)

    def _apply(self, X):
        return X.copy()

    _apply_adjoint = _apply


class DiagonalOperator(LinearOperator):
    def __init__(self, diag):
        diag = np.asarray(diag, float)
        super().__init__(diag.size, diag.size)
        self.diag = diag

    def _apply(self, X):
        return self.diag[:, None] * X

    _apply_adjoint = _apply


class DenseOperator(LinearOperator):
    """Wraps an explicit matrix; adjoint is the transpose (Euclidean)."""

    def __init__(self, matrix, counter=None, apply_cost=0, adjoint_cost=None):
        matrix = np.asarray(matrix, float)
        if matrix.ndim != 2:
            raise ContractError("DenseOperator needs a 2-D matrix")
        super().__init__(matrix.shape[0], matrix.shape[1], counter=counter,
                         apply_cost=apply_cost, adjoint_cost=adjoint_cost)
        self.matrix = matrix

    def _apply(self, X):
        return self.matrix @ X

    def _apply_adjoint(self, Y):
        return self.matrix.T @ Y


class SymmetricOperator(LinearOperator):
    """A square operator whose adjoint equals itself (Euclidean)."""

    def __init__(self, n, apply_block, counter=None, apply_cost=0):
        super().__init__(n, n, counter=counter, apply_cost=apply_cost,
                         adjoint_cost=apply_cost)
        self._apply_block = apply_block

    def _apply(self, X):
        return self._apply_block(X)

    _apply_adjoint = _apply


class ComposedOperator(LinearOperator):
    """B o A applied right to left; children do their own solve counting."""

    def __init__(self, outer, inner):
        if outer.cols != inner.rows:
            raise ContractError(f"cannot compose {outer.rows}x{outer.cols} with {inner.rows}x{inner.cols}")
        super().__init__(outer.rows, inner.cols, domain_weight=inner.domain_weight)
        self.outer = outer
        self.inner = inner

    def _apply(self, X):
        return self.outer.apply(self.inner.apply(X))

    def _apply_adjoint(self, Y):
        Z = self.outer.apply_adjoint(Y)
        return self.inner.apply_adjoint(Z)


def materialize_dense(op, cap=DENSE_CAP, block=256):
    """Materialize `op` column by column: column j equals op.apply(e_j).

    Refuses instances larger than `cap` entries; costs `cols` applications
    (i.e. op.apply_cost * cols PDE solves on model-backed operators).
    """
    if op.rows * op.cols > cap:
        raise CapExceededError(
            f"dense materialization of {op.rows}x{op.cols} exceeds the cap of {cap} entries")
    out = np.empty((op.rows, op.cols))
    eye = np.eye(op.cols)
    for start in range(0, op.cols, block):
        stop = min(start + block, op.cols)
        out[:, start:stop] = op.apply(eye[:, start:stop])
    return out


def materialize_dense_adjoint(op, cap=DENSE_CAP, block=256):
    """Materialize via adjoint columns; cheaper when rows < cols.

    Only valid for Euclidean-domain operators, where apply_adjoint is the
    plain transpose.
    """
    if op.domain_weight is not None:
        raise ContractError("adjoint materialization requires a Euclidean domain")
    if op.rows * op.cols > cap:
        raise CapExceededError(
            f"dense materialization of {op.rows}x{op.cols} exceeds the cap of {cap} entries")
    out = np.empty((op.cols, op.rows))
    eye = np.eye(op.rows)
    for start in range(0, op.rows, block):
        stop = min(start + block, op.rows)
        out[:, start:stop] = op.apply_adjoint(eye[:, start:stop])
    return out.T


def adjoint_test(op, trials=5, seed=0):
    """Max over trials of |<Ax, y> - <x, A*y>_W| / (||x|| ||y||).

    Deterministic given the seed; the domain weight W is taken from the
    operator (Euclidean when None).
    """
    if trials < 1:
        raise ContractError("adjoint_test needs at least one trial")
    X = standard_normal_matrix(op.cols, trials, seed)
    Y = standard_normal_matrix(op.rows, trials, derived_seed(seed, 2))
    w = np.ones(op.cols) if op.domain_weight is None else op.domain_weight
    worst = 0.0
    for t in range(trials):
        x, y = X[:, t], Y[:, t]
        lhs = np.dot(op.apply(x), y)
        rhs = np.dot(x * w, op.apply_adjoint(y))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return worst


class PowerIterationResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def operator_norm(op, tol=1e-8, max_iter=500, seed=0):
    """Largest eigenvalue of a symmetric PSD operator by power iteration.

    Converged when the Rayleigh quotient changes by a relative amount <= tol;
    deterministic given the seed.
    """
    if op.rows != op.cols:
        raise ContractError("operator_norm needs a square operator")
    x = standard_normal_matrix(op.rows, 1, seed)[:, 0]
    x /= np.linalg.norm(x)
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = op.apply(x)
        norm_y = np.linalg.norm(y)
        if norm_y == 0.0:
            return PowerIterationResult(0.0, it, True)
        lam_new = float(np.dot(x, y))
        x = y / norm_y
        if it > 1 and abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            return PowerIterationResult(lam_new, it, True)
        lam = lam_new
    return PowerIterationResult(lam, max_iter, False)


def cg_solve(matvec, b, tol=1e-10, max_iter=500, x0=None, allow_failures=False):
    """Conjugate gradients on an SPD system, vectorized over RHS columns.

    Each column runs its own CG recurrence in lockstep; a column freezes as
    soon as its relative residual ||r|| <= tol * ||b|| is met, so results do
    not depend on what other columns are in the batch.

    Parameters
    ----------
    matvec : callable or scipy sparse matrix
    b : (n,) or (n, k) array
    x0 : optional warm start, same shape as b
    allow_failures : bool
        When True, return (X, converged_mask) instead of raising on
        non-convergence.

    Raises
    ------
    SolverError
        If any column fails to reach the tolerance (and failures are not
        allowed); carries the worst relative residual.
    """
    if not callable(matvec):
        mat = matvec
        matvec = lambda v: mat @ v
    b = np.asarray(b, float)
    single = b.ndim == 1
    B = b[:, None] if single else b
    n, k = B.shape

    X = np.zeros_like(B) if x0 is None else np.array(x0, float, copy=True).reshape(n, k)
    bnorm = np.linalg.norm(B, axis=0)
    target = tol * np.where(bnorm > 0.0, bnorm, 1.0)

    R = B - matvec(X) if x0 is not None else B.copy()
    active = np.linalg.norm(R, axis=0) > target
    P = R.copy()
    rs = np.einsum("ij,ij->j", R, R)

    iters = 0
    while active.any() and iters < max_iter:
        iters += 1
        idx = np.flatnonzero(active)
        AP = matvec(P[:, idx])
        denom = np.einsum("ij,ij->j", P[:, idx], AP)
        # A zero curvature direction on an SPD system means r = 0 already.
        safe = np.where(denom > 0.0, denom, 1.0)
        alpha = rs[idx] / safe
        alpha[denom <= 0.0] = 0.0
        X[:, idx] += P[:, idx] * alpha
        R[:, idx] -= AP * alpha
        rs_new = np.einsum("ij,ij->j", R[:, idx], R[:, idx])
        beta = rs_new / np.where(rs[idx] > 0.0, rs[idx], 1.0)
        P[:, idx] = R[:, idx] + P[:, idx] * beta
        rs[idx] = rs_new
        active[idx] = np.sqrt(rs_new) > target[idx]

    if allow_failures:
        return (X[:, 0] if single else X), ~active
    if active.any():
        rel = np.sqrt(rs[active]) / np.where(bnorm[active] > 0, bnorm[active], 1.0)
        raise SolverError(
            f"CG did not converge in {max_iter} iterations "
            f"(worst relative residual {rel.max():.3e})",
            residual=float(rel.max()))
    return X[:, 0] if single else X


def write_matrix_csv(path, matrix):
    """Write a dense matrix as CSV: header line `rows,cols`, then row-major
    values at 17 significant digits."""
    matrix = np.asarray(matrix, float)
    with open(path, "w") as fh:
        fh.write(f"{matrix.shape[0]},{matrix.shape[1]}\n")
        for row in matrix:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_matrix_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows, cols = int(header[0]), int(header[1])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (rows, cols):
        raise ContractError(f"{path}: header says {rows}x{cols}, data is {data.shape}")
    return data
