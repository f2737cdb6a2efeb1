"""Design criteria, randomized estimators, exact oracles, and error bounds.

The A-optimal criterion is the shifted average posterior variance
trace((I + H(w))^{-1} Z) - trace(Z) with H(w) the prior-preconditioned
data-misfit Hessian and Z the whitened prior covariance; the modified
criterion drops Z.  Both are estimated from a randomized low-rank sketch of
H(w): the criterion value and gradient become small dense expressions in the
sketch's Ritz pairs plus a design-independent precomputed vector s.
"""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse.linalg as spla

from .errors import (AssumptionError, ContractError, NumericalError,
                     SolverError)
from .linops import (DENSE_CAP, SymmetricOperator, cg_solve,
                     materialize_dense, materialize_dense_adjoint)
from .rng import derived_seed, standard_normal_matrix
from .sketch import LowRankFactors, SketchConfig, subspace_iteration

log = logging.getLogger(__name__)


def clip_design(w, n_sensors=None):
    """Validate and clamp a design-weight vector into [0, 1]^{n_s}.

    Violations beyond 1e-12 are clamped with a warning; smaller excursions
    are clamped silently (optimizer round-off).
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ContractError("design vector must be one-dimensional")
    if n_sensors is not None and w.size != n_sensors:
        raise ContractError(f"design vector has {w.size} entries, expected {n_sensors}")
    if w.min(initial=0.0) < -1e-12 or w.max(initial=0.0) > 1.0 + 1e-12:
        warnings.warn("design weights outside [0,1] clamped onto the box",
                      stacklevel=2)
    return np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class NoiseWeights:
    """Per-sensor noise standard deviations sigma_i > 0.

    The block-diagonal observation weighting is never materialized: designs
    enter through the per-entry vector w_i / sigma_i^2 repeated over the
    time blocks (time-major ordering).
    """

    sigmas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigmas", np.asarray(self.sigmas, float))
        if self.sigmas.ndim != 1 or np.any(self.sigmas <= 0):
            raise ContractError("noise levels must be a vector of positive reals")

    @property
    def n_sensors(self):
        return self.sigmas.size

    def weight_vector(self, w, n_times):
        """Observation-space diagonal of W^noise for design w."""
        return np.tile(np.asarray(w, float) / self.sigmas**2, n_times)


def misfit_hessian(fcal, noise, w):
    """H(w) = Fcal^T W^noise(w) Fcal as a symmetric PSD operator.

    Each application costs two PDE solves (one forward, one adjoint),
    accounted on the fcal counter.
    """
    n_times = fcal.rows // noise.n_sensors
    if n_times * noise.n_sensors != fcal.rows:
        raise ContractError("observation dimension is not n_sensors * n_times")
    wvec = noise.weight_vector(w, n_times)

    def apply_block(X):
        return fcal.apply_adjoint(wvec[:, None] * fcal.apply(X))

    return SymmetricOperator(fcal.cols, apply_block, counter=fcal.counter)


def hm_apply(fcal, noise, w, v):
    """Apply H(w) to a vector or block (no clamping: linear in w)."""
    return misfit_hessian(fcal, noise, w).apply(v)


@dataclass
class PrecomputedS:
    """Design-independent first gradient term s_j <= 0, one per sensor."""

    mode: str
    s: np.ndarray
    pde_solves_spent: int


def precompute_s(fcal, noise, mode, z_op=None, cache_dir=None, problem_key=None):
    """Precompute s_j = -trace(Z Fcal^T E_j Fcal) (Z = I in 'mod' mode).

    Costs exactly n_sensors * n_times adjoint PDE solves (plus prior solves
    for the Z applications in 'aopt' mode).  When `cache_dir` and
    `problem_key` are given the result is persisted to disk and reloaded on
    matching keys; a mismatching key triggers a recompute with a notice.
    """
    if mode not in ("aopt", "mod"):
        raise ContractError(f"unknown precompute mode {mode!r}")
    if mode == "aopt" and z_op is None:
        raise ContractError("aopt mode requires the Z operator")

    cache_file = None
    if cache_dir is not None and problem_key is not None:
        cache_file = Path(cache_dir) / f"precomputed_s_{mode}_{problem_key[:24]}.npz"
        if cache_file.exists():
            stored = np.load(cache_file, allow_pickle=False)
            if str(stored["key"]) == problem_key and str(stored["mode"]) == mode:
                return PrecomputedS(mode, np.asarray(stored["s"], float), 0)
            log.warning("cache key mismatch in %s; recomputing", cache_file)

    n_s = noise.n_sensors
    n_t = fcal.rows // n_s
    scale = np.tile(1.0 / noise.sigmas, n_t)
    # Columns of Fcal^T (E_j)^{1/2} over the n_t unit observation vectors of
    # every sensor: one block adjoint application of the scaled identity.
    g = fcal.apply_adjoint(np.diag(scale))
    if mode == "aopt":
        zg = z_op.apply(g)
        quad = np.einsum("nk,nk->k", g, zg)
    else:
        quad = np.einsum("nk,nk->k", g, g)
    s = -quad.reshape(n_t, n_s).sum(axis=0)
    result = PrecomputedS(mode, s, n_s * n_t)

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache_file, s=s, key=problem_key, mode=mode)
    return result


@dataclass
class EstimatorReport:
    """Criterion value, gradient, and diagnostics of one estimator run."""

    value: float
    gradient: np.ndarray
    ell: int
    k: int
    p: int
    q: int
    seed: int
    lambda_t: np.ndarray
    pde_solves: int
    degraded: bool = False

    def to_dict(self):
        return {
            "value": self.value,
            "gradient": None if self.gradient is None else [float(v) for v in self.gradient],
            "ell": self.ell, "k": self.k, "p": self.p, "q": self.q,
            "seed": self.seed,
            "lambda_t": [float(v) for v in self.lambda_t],
            "pde_solves": self.pde_solves,
            "degraded": self.degraded,
        }


def _sensor_blocks(obs_block, n_s):
    """Reshape (n_obs, ell) observation columns to (n_t, n_s, ell)."""
    n_t = obs_block.shape[0] // n_s
    return obs_block.reshape(n_t, n_s, obs_block.shape[1])


def _gradient_aopt(s, a_obs, b_obs, d, zgram, noise):
    ar = _sensor_blocks(a_obs, noise.n_sensors)
    br = _sensor_blocks(b_obs, noise.n_sensors)
    inv_var = 1.0 / noise.sigmas**2
    first = 2.0 * np.einsum("tji,tji,i->j", br, ar, d) * inv_var
    dd_gram = (d[:, None] * d[None, :]) * zgram
    second = np.einsum("tji,tjk,ik->j", ar, ar, dd_gram) * inv_var
    return s + first - second


def _gradient_moda(s, a_obs, d, noise):
    ar = _sensor_blocks(a_obs, noise.n_sensors)
    inv_var = 1.0 / noise.sigmas**2
    coef = 2.0 * d - d**2
    return s + np.einsum("tji,tji,i->j", ar, ar, coef) * inv_var


def _check_finite(report):
    if not np.isfinite(report.value):
        raise NumericalError("criterion value is not finite")
    if report.gradient is not None and not np.all(np.isfinite(report.gradient)):
        raise NumericalError("criterion gradient is not finite")
    return report


def randomized_aopt(fcal, z_op, noise, w, cfg, s, want_gradient=True):
    """Randomized A-optimal criterion and gradient at design w.

    Sketches H(w) by subspace iteration (4*ell PDE solves at q=1), then
    spends 2*ell more solves on Fcal V and Fcal Z V for the gradient; the
    value is -sum_i d_i v_i^T Z v_i.
    """
    if s.mode != "aopt":
        raise ContractError("precomputed s has the wrong mode for the A-optimal criterion")
    w = clip_design(w, noise.n_sensors)
    start = fcal.solve_count

    factors = subspace_iteration(misfit_hessian(fcal, noise, w), cfg)
    zv = z_op.apply(factors.v)
    zgram = factors.v.T @ zv
    zgram = 0.5 * (zgram + zgram.T)
    value = -float(np.sum(factors.d * np.diag(zgram)))

    gradient = None
    if want_gradient:
        a_obs = fcal.apply(factors.v)
        b_obs = fcal.apply(zv)
        gradient = _gradient_aopt(s.s, a_obs, b_obs, factors.d, zgram, noise)

    return _check_finite(EstimatorReport(
        value=value, gradient=gradient, ell=cfg.ell, k=cfg.k, p=cfg.p,
        q=cfg.q, seed=cfg.seed, lambda_t=factors.lambda_t.copy(),
        pde_solves=fcal.solve_count - start, degraded=factors.degraded))


def randomized_moda(fcal, noise, w, cfg, s, want_gradient=True):
    """Randomized modified A-optimal criterion and gradient at design w.

    Value is -trace(D_T); only Fcal V is needed for the gradient, so a full
    evaluation costs 5*ell PDE solves at q=1.
    """
    if s.mode != "mod":
        raise ContractError("precomputed s has the wrong mode for the modified criterion")
    w = clip_design(w, noise.n_sensors)
    start = fcal.solve_count

    factors = subspace_iteration(misfit_hessian(fcal, noise, w), cfg)
    value = -float(np.sum(factors.d))

    gradient = None
    if want_gradient:
        a_obs = fcal.apply(factors.v)
        gradient = _gradient_moda(s.s, a_obs, factors.d, noise)

    return _check_finite(EstimatorReport(
        value=value, gradient=gradient, ell=cfg.ell, k=cfg.k, p=cfg.p,
        q=cfg.q, seed=cfg.seed, lambda_t=factors.lambda_t.copy(),
        pde_solves=fcal.solve_count - start, degraded=factors.degraded))


class ExactEvaluator:
    """Dense desk-scale oracle for both criteria and their gradients.

    Materializes Fcal once (min(n_obs, n) PDE solves) and Z once (prior
    solves only); every evaluation afterwards is dense linear algebra.
    """

    def __init__(self, problem, cap=DENSE_CAP):
        fcal = problem.fcal_operator()
        start = fcal.solve_count
        if fcal.rows <= fcal.cols:
            self.fcal_dense = materialize_dense_adjoint(fcal, cap=cap)
        else:
            self.fcal_dense = materialize_dense(fcal, cap=cap)
        self.construction_pde_solves = fcal.solve_count - start
        self.z_dense = materialize_dense(problem.z_operator(), cap=cap)
        self.z_dense = 0.5 * (self.z_dense + self.z_dense.T)
        self.noise = NoiseWeights(np.asarray(problem.obs.sigmas))
        self.n_times = problem.obs.n_times
        self.n = problem.n

    def hm_dense(self, w):
        wvec = self.noise.weight_vector(clip_design(w, self.noise.n_sensors), self.n_times)
        return self.fcal_dense.T @ (wvec[:, None] * self.fcal_dense)

    def spectrum(self, w):
        """Eigenvalues of H(w), descending, clamped at zero."""
        lam = np.linalg.eigvalsh(self.hm_dense(w))[::-1]
        return np.maximum(lam, 0.0)

    def _resolvent(self, w):
        h = self.hm_dense(w)
        return np.linalg.solve(np.eye(self.n) + h, np.eye(self.n))

    def _sensor_diag(self, x_obs):
        inv_var = 1.0 / self.noise.sigmas**2
        return np.diag(x_obs).reshape(self.n_times, self.noise.n_sensors).sum(axis=0) * inv_var

    def aopt(self, w):
        """Exact A-optimal value and gradient."""
        g = self._resolvent(w)
        value = float(np.trace(g @ self.z_dense) - np.trace(self.z_dense))
        gzg = g @ self.z_dense @ g
        x_obs = self.fcal_dense @ gzg @ self.fcal_dense.T
        return value, -self._sensor_diag(x_obs)

    def moda(self, w):
        """Exact modified A-optimal value and gradient."""
        g = self._resolvent(w)
        value = float(np.trace(g) - self.n)
        x_obs = self.fcal_dense @ (g @ g) @ self.fcal_dense.T
        return value, -self._sensor_diag(x_obs)

    def s_vector(self, mode):
        """Exact design-independent gradient term for either criterion."""
        if mode == "aopt":
            quad = np.einsum("kn,nm,km->k", self.fcal_dense, self.z_dense, self.fcal_dense)
        else:
            quad = np.einsum("kn,kn->k", self.fcal_dense, self.fcal_dense)
        inv_var = 1.0 / self.noise.sigmas**2
        return -quad.reshape(self.n_times, self.noise.n_sensors).sum(axis=0) * inv_var


def exact_reference(problem, w, cap=DENSE_CAP):
    """(phi_aopt, grad_aopt, phi_mod, grad_mod) by dense linear algebra."""
    oracle = ExactEvaluator(problem, cap=cap)
    phi_a, grad_a = oracle.aopt(w)
    phi_m, grad_m = oracle.moda(w)
    return phi_a, grad_a, phi_m, grad_m


def eigk_factors(fcal, noise, w, k, tol=1e-8, seed=0, maxiter=None):
    """Top-k eigenpairs of H(w) by matrix-free Lanczos, as LowRankFactors.

    Residuals ||H v - lambda v|| are checked against tol * lambda_max; the
    factors slot into the same estimator formulas as the randomized sketch.
    """
    n = fcal.cols
    if k < 1 or k > min(fcal.rows, n):
        raise ContractError(f"target rank k={k} outside [1, min(n_obs, n)]")
    hm = misfit_hessian(fcal, noise, w)

    if k >= n - 1:
        # ARPACK needs k < n-1; fall back to a dense solve of the
        # materialized operator (2n PDE solves, desk scale only).
        h_dense = materialize_dense(hm)
        lam_all, vec_all = np.linalg.eigh(0.5 * (h_dense + h_dense.T))
        lam = lam_all[::-1][:k]
        vecs = vec_all[:, ::-1][:, :k]
    else:
        v0 = standard_normal_matrix(n, 1, seed)[:, 0]
        matvec = lambda v: hm.apply(v.ravel())
        op = spla.LinearOperator((n, n), matvec=matvec)
        try:
            lam, vecs = spla.eigsh(op, k=k, which="LA", v0=v0, maxiter=maxiter)
        except spla.ArpackNoConvergence as exc:
            raise NumericalError(f"Lanczos did not converge: {exc}") from exc
        order = np.argsort(lam)[::-1]
        lam, vecs = lam[order], vecs[:, order]

    lam = np.maximum(lam, 0.0)
    hv = hm.apply(vecs)
    resid = np.linalg.norm(hv - vecs * lam[None, :], axis=0)
    lam_max = lam[0] if lam.size else 0.0
    if lam_max > 0 and np.any(resid > tol * lam_max):
        raise NumericalError(
            f"eigenpair residuals {resid.max():.3e} exceed {tol:.1e} * lambda_max")
    return LowRankFactors(q_basis=vecs, t_matrix=np.diag(lam), v=vecs,
                          lambda_t=lam, d=lam / (1.0 + lam))


def estimate_from_factors(factors, fcal, noise, w, s, z_op=None):
    """Criterion value/gradient from externally supplied factors (Eig-k).

    Spends ell (mod) or 2*ell (aopt) PDE solves on the observation images of
    the Ritz vectors.
    """
    w = clip_design(w, noise.n_sensors)
    start = fcal.solve_count
    a_obs = fcal.apply(factors.v)
    if s.mode == "aopt":
        if z_op is None:
            raise ContractError("aopt estimation requires the Z operator")
        zv = z_op.apply(factors.v)
        zgram = factors.v.T @ zv
        zgram = 0.5 * (zgram + zgram.T)
        value = -float(np.sum(factors.d * np.diag(zgram)))
        gradient = _gradient_aopt(s.s, a_obs, fcal.apply(zv), factors.d, zgram, noise)
    else:
        value = -float(np.sum(factors.d))
        gradient = _gradient_moda(s.s, a_obs, factors.d, noise)
    ell = factors.v.shape[1]
    return _check_finite(EstimatorReport(
        value=value, gradient=gradient, ell=ell, k=ell, p=0, q=0, seed=-1,
        lambda_t=factors.lambda_t.copy(),
        pde_solves=fcal.solve_count - start, degraded=factors.degraded))


class FrozenForward:
    """Truncated SVD of Fcal, computed once and reused with zero PDE solves.

    H(w) is approximated by V S (U^T W U) S V^T, so each criterion
    evaluation reduces to a k-by-k eigenproblem plus small dense products
    (Z applications still cost prior solves, never PDE solves).
    """

    def __init__(self, u, sv, v, construction_pde_solves, reduced=False):
        self.u = u          # (n_obs, k) left singular vectors
        self.sv = sv        # (k,) singular values
        self.v = v          # (n, k) right singular vectors
        self.construction_pde_solves = construction_pde_solves
        self.reduced = reduced

    @property
    def k(self):
        return self.sv.size

    def factors_for(self, noise, w, n_times):
        """Spectral factors of the frozen H(w) as LowRankFactors."""
        w = clip_design(w, noise.n_sensors)
        if self.k == 0:
            empty = np.zeros((self.v.shape[0], 0))
            return LowRankFactors(q_basis=empty, t_matrix=np.zeros((0, 0)),
                                  v=empty, lambda_t=np.zeros(0), d=np.zeros(0))
        wvec = noise.weight_vector(w, n_times)
        core = self.u.T @ (wvec[:, None] * self.u)
        t = (self.sv[:, None] * core) * self.sv[None, :]
        lam, p = np.linalg.eigh(0.5 * (t + t.T))
        lam = np.maximum(lam[::-1], 0.0)
        p = p[:, ::-1]
        return LowRankFactors(q_basis=self.v @ p, t_matrix=np.diag(lam),
                              v=self.v @ p, lambda_t=lam, d=lam / (1.0 + lam),
                              operator_applications=0)

    def _obs_image(self, x):
        """Fcal_k applied through the stored factors: U S V^T x."""
        return self.u @ (self.sv[:, None] * (self.v.T @ x))

    def precompute_s(self, noise, mode, z_op=None, n_times=None):
        """s_j from the truncated factors; zero PDE solves."""
        if mode == "aopt" and z_op is None:
            raise ContractError("aopt mode requires the Z operator")
        n_t = n_times if n_times is not None else self.u.shape[0] // noise.n_sensors
        scale = np.tile(1.0 / noise.sigmas, n_t)
        g = self.v @ (self.sv[:, None] * (self.u.T * scale[None, :]))
        if mode == "aopt":
            quad = np.einsum("nk,nk->k", g, z_op.apply(g) if g.size else g)
        else:
            quad = np.einsum("nk,nk->k", g, g)
        s = -quad.reshape(n_t, noise.n_sensors).sum(axis=0)
        return PrecomputedS(mode, s, 0)

    def evaluate_aopt(self, noise, w, z_op, s, n_times=None):
        n_t = n_times if n_times is not None else self.u.shape[0] // noise.n_sensors
        factors = self.factors_for(noise, w, n_t)
        if self.k == 0:
            return EstimatorReport(0.0, s.s.copy(), 0, 0, 0, 0, -1,
                                   np.zeros(0), 0)
        zv = z_op.apply(factors.v)
        zgram = factors.v.T @ zv
        zgram = 0.5 * (zgram + zgram.T)
        value = -float(np.sum(factors.d * np.diag(zgram)))
        a_obs = self._obs_image(factors.v)
        b_obs = self._obs_image(zv)
        gradient = _gradient_aopt(s.s, a_obs, b_obs, factors.d, zgram, noise)
        return _check_finite(EstimatorReport(
            value=value, gradient=gradient, ell=self.k, k=self.k, p=0, q=0,
            seed=-1, lambda_t=factors.lambda_t.copy(), pde_solves=0))

    def evaluate_moda(self, noise, w, s, n_times=None):
        n_t = n_times if n_times is not None else self.u.shape[0] // noise.n_sensors
        factors = self.factors_for(noise, w, n_t)
        if self.k == 0:
            return EstimatorReport(0.0, s.s.copy(), 0, 0, 0, 0, -1,
                                   np.zeros(0), 0)
        value = -float(np.sum(factors.d))
        a_obs = self._obs_image(factors.v)
        gradient = _gradient_moda(s.s, a_obs, factors.d, noise)
        return _check_finite(EstimatorReport(
            value=value, gradient=gradient, ell=self.k, k=self.k, p=0, q=0,
            seed=-1, lambda_t=factors.lambda_t.copy(), pde_solves=0))


def frozen_svd(fcal, k, cap=DENSE_CAP):
    """Rank-k SVD of Fcal (min(n_obs, n) PDE solves, desk scale).

    Requests beyond the full rank are truncated to it and flagged.
    """
    start = fcal.solve_count
    if fcal.rows <= fcal.cols:
        dense = materialize_dense_adjoint(fcal, cap=cap)
    else:
        dense = materialize_dense(fcal, cap=cap)
    spent = fcal.solve_count - start
    u, sv, vt = np.linalg.svd(dense, full_matrices=False)
    full = sv.size
    reduced = k > full
    k_eff = min(max(int(k), 0), full)
    return FrozenForward(u[:, :k_eff], sv[:k_eff], vt[:k_eff].T, spent,
                         reduced=reduced)


# ---------------------------------------------------------------------------
# Theoretical error bounds
# ---------------------------------------------------------------------------

def bound_constant(k, p, r):
    """Oversampling constant of the expectation bounds.

    C = e^2 (k+p) / (p+1)^2 * (2 pi (p+1))^{-2/(p+1)} * (mu + sqrt(2))^2
        * (p+1)/(p-1),  mu = sqrt(r-k) + sqrt(k+p).
    """
    if p <= 1:
        raise ContractError("oversampling p must exceed 1 for the bound constant")
    if k < 1 or r < k:
        raise ContractError("need r >= k >= 1")
    mu = np.sqrt(r - k) + np.sqrt(k + p)
    return (np.e**2 * (k + p) / (p + 1) ** 2
            * (1.0 / (2.0 * np.pi * (p + 1))) ** (2.0 / (p + 1))
            * (mu + np.sqrt(2.0)) ** 2
            * (p + 1) / (p - 1))


@dataclass
class BoundReport:
    """Expectation bound on |Phi - Phi_hat| for one (k, p, q)."""

    gamma_k: float
    constant: float
    bound_value: float
    z_norm: float
    trace_terms: tuple
    k: int
    p: int
    q: int
    mode: str

    def to_dict(self):
        return {
            "gamma_k": self.gamma_k, "constant": self.constant,
            "bound_value": self.bound_value, "z_norm": self.z_norm,
            "trace_tail": self.trace_terms[0],
            "trace_perturbed": self.trace_terms[1],
            "k": self.k, "p": self.p, "q": self.q, "mode": self.mode,
        }


def theorem_bound(lambda_exact, k, p, q, z_norm=1.0, mode="aopt",
                  rank_rtol=1e-12):
    """Expectation error bound from the exact spectrum of H(w).

    bound = z_norm * (sum_{i>k} f(lambda_i) + sum_{i>k} f(gamma^{2q-1} C lambda_i))
    with f(x) = x/(1+x); z_norm is forced to 1 for the modified criterion.
    Requires gamma_k = lambda_{k+1}/lambda_k < 1 and lambda_k > 0.
    """
    lam = np.sort(np.asarray(lambda_exact, float))[::-1]
    if k < 1 or k >= lam.size:
        raise ContractError(f"target rank k={k} must lie in [1, {lam.size - 1}]")
    if lam[k - 1] <= 0.0:
        raise AssumptionError("lambda_k must be positive for the bound")
    gamma = lam[k] / lam[k - 1]
    if gamma >= 1.0:
        raise AssumptionError(f"eigenvalue ratio gamma_k = {gamma:.4f} is not < 1")
    rank = int(np.sum(lam > rank_rtol * lam[0]))
    c = bound_constant(k, p, max(rank, k))
    f = lambda x: x / (1.0 + x)
    tail = lam[k:]
    t1 = float(np.sum(f(tail)))
    t2 = float(np.sum(f(gamma ** (2 * q - 1) * c * tail)))
    zn = 1.0 if mode == "mod" else float(z_norm)
    return BoundReport(gamma_k=float(gamma), constant=float(c),
                       bound_value=zn * (t1 + t2), z_norm=zn,
                       trace_terms=(t1, t2), k=k, p=p, q=q, mode=mode)


def gradient_bound_value(report, pj_norm):
    """Gradient version of the bound: multiply by 2 ||P_j||_2."""
    return 2.0 * float(pj_norm) * report.bound_value


# ---------------------------------------------------------------------------
# Bayes-risk Monte Carlo check
# ---------------------------------------------------------------------------

class BayesRiskResult(NamedTuple):
    estimate: float
    std_error: float
    n_used: int
    n_skipped: int


def bayes_risk_mc(problem, w, n_samples, seed, cg_tol=1e-10, cg_max_iter=400):
    """Monte Carlo estimate of trace(Gamma_post(w) - Gamma_pr).

    Draws parameters from the prior and data from the w-weighted likelihood,
    computes each posterior mean by CG on (I + H(w)) in preconditioned
    coordinates, and averages ||m_post - m||_M^2 - ||m_pr - m||_M^2, whose
    expectation is the A-optimal criterion (Bayes risk under a shifted
    squared-error loss).
    """
    if n_samples < 10:
        raise ContractError("need at least 10 Monte Carlo samples")
    w = clip_design(w, len(problem.obs.sigmas))
    grid = problem.grid
    mass = problem.mass_diag
    root_mass = np.sqrt(mass)
    fcal = problem.fcal_operator()
    noise = NoiseWeights(np.asarray(problem.obs.sigmas))
    n_t = problem.obs.n_times
    wvec = noise.weight_vector(w, n_t)

    # Prior samples m = K^{-1} M^{1/2} xi (zero prior mean).
    xi = standard_normal_matrix(grid.n, n_samples, seed)
    m = problem.prior.sqrt_apply(xi / root_mass[:, None])

    data = problem.forward(m)
    noise_std = np.tile(noise.sigmas, n_t).astype(float)
    active = np.tile(w, n_t) > 0.0
    noise_std[active] /= np.sqrt(np.tile(w, n_t)[active])
    eta = standard_normal_matrix(data.shape[0], n_samples, derived_seed(seed, 5))
    y = data + noise_std[:, None] * eta

    g = fcal.apply_adjoint(wvec[:, None] * y)

    def matvec(x):
        return x + fcal.apply_adjoint(wvec[:, None] * fcal.apply(x))

    x, converged = cg_solve(matvec, g, tol=cg_tol, max_iter=cg_max_iter,
                            allow_failures=True)
    n_skipped = int((~converged).sum())
    if n_skipped > 0.1 * n_samples:
        raise SolverError(
            f"{n_skipped}/{n_samples} posterior-mean solves failed to converge",
            residual=None)

    m_post = problem.prior.sqrt_apply(x / root_mass[:, None])
    delta = (np.einsum("n,nk,nk->k", mass, m_post - m, m_post - m)
             - np.einsum("n,nk,nk->k", mass, m, m))
    delta = delta[converged]
    estimate = float(delta.mean())
    std_error = float(delta.std(ddof=1) / np.sqrt(delta.size))
    return BayesRiskResult(estimate, std_error, int(delta.size), n_skipped)
