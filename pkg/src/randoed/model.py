"""Contaminant-transport model problem on the unit square.

Forward model: implicit-diffusion / explicit-upwind-advection (IMEX) Euler
steps of  u_t - kappa*Lap(u) + v.grad(u) = 0  with homogeneous Neumann flux,
observed pointwise at sensor nodes at a few times.  The prior covariance is
the squared inverse of a Laplacian-like elliptic operator.  Both solvers are
conjugate gradients on symmetric positive definite systems; the adjoint is
the exact discrete transpose of the time stepper, which is what makes the
whole estimator stack verifiable to solver tolerance.

The velocity is the analytic recirculating field of the stream function
psi = amplitude * sin(pi x)^2 * sin(pi y)^2: divergence-free, zero on the
boundary, advection-dominated in the interior for modest amplitudes.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractError
from .linops import LinearOperator, SolveCounter, SymmetricOperator, cg_solve


@dataclass(frozen=True)
class Grid2D:
    """Node-centered uniform grid on [0,1]^2; flat index = j*nx + i."""

    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ContractError("grid needs at least 4 nodes per axis")

    @property
    def hx(self):
        return 1.0 / (self.nx - 1)

    @property
    def hy(self):
        return 1.0 / (self.ny - 1)

    @property
    def h(self):
        return self.hx

    @property
    def n(self):
        return self.nx * self.ny

    def coordinates(self):
        """(x, y) arrays of all n nodes in flat-index order."""
        x = np.tile(np.linspace(0.0, 1.0, self.nx), self.ny)
        y = np.repeat(np.linspace(0.0, 1.0, self.ny), self.nx)
        return x, y

    def flat_index(self, i, j):
        return j * self.nx + i


def velocity_eval(x, y, amplitude=20.0):
    """Velocity (vx, vy) of the recirculating stream-function field.

    vx = d(psi)/dy, vy = -d(psi)/dx for psi = amplitude*sin(pi x)^2*sin(pi y)^2,
    so the field is exactly divergence-free and vanishes on the boundary.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    vx = amplitude * np.pi * np.sin(np.pi * x) ** 2 * np.sin(2.0 * np.pi * y)
    vy = -amplitude * np.pi * np.sin(2.0 * np.pi * x) * np.sin(np.pi * y) ** 2
    return vx, vy


def velocity_max(amplitude):
    """Analytic sup-norm of the velocity field (attained mid-edge)."""
    return abs(amplitude) * np.pi


@dataclass(frozen=True)
class AdvDiffModel:
    grid: Grid2D
    kappa: float = 0.01
    velocity_amplitude: float = 20.0
    dt: float = 5e-4
    t_final: float = 5.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ContractError("kappa must be positive")
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-12 * max(steps, 1.0):
            raise ContractError("t_final must be a whole number of time steps")
        vmax = velocity_max(self.velocity_amplitude)
        if vmax > 0:
            h = min(self.grid.hx, self.grid.hy)
            if self.dt > h / vmax * (1 + 1e-12):
                raise ContractError(
                    f"explicit advection is unstable: dt={self.dt} exceeds "
                    f"h/max|v| = {h / vmax:.6g}")

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))


def _graph_laplacian_1d(m):
    main = np.full(m, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(m - 1)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def neumann_laplacian(grid):
    """5-point Neumann Laplacian (approximates -Lap): symmetric PSD with the
    constant null vector."""
    lx = _graph_laplacian_1d(grid.nx) / grid.hx**2
    ly = _graph_laplacian_1d(grid.ny) / grid.hy**2
    return (sp.kron(sp.identity(grid.ny), lx) + sp.kron(ly, sp.identity(grid.nx))).tocsr()


def prior_stiffness(grid):
    """Stiffness of the Neumann graph Laplacian scaled by the cell geometry."""
    lx = _graph_laplacian_1d(grid.nx) * (grid.hy / grid.hx)
    ly = _graph_laplacian_1d(grid.ny) * (grid.hx / grid.hy)
    return (sp.kron(sp.identity(grid.ny), lx) + sp.kron(ly, sp.identity(grid.nx))).tocsr()


def upwind_advection(grid, amplitude):
    """First-order upwind discretization of v . grad(u) as a sparse matrix.

    The velocity vanishes on the boundary, so no stencil arm ever reaches
    outside the grid where its coefficient is nonzero; missing arms are
    masked anyway.
    """
    x, y = grid.coordinates()
    vx, vy = velocity_eval(x, y, amplitude)
    n = grid.n
    i = np.arange(n) % grid.nx
    j = np.arange(n) // grid.nx

    vxp, vxm = np.maximum(vx, 0.0), np.minimum(vx, 0.0)
    vyp, vym = np.maximum(vy, 0.0), np.minimum(vy, 0.0)
    has_w, has_e = i > 0, i < grid.nx - 1
    has_s, has_n = j > 0, j < grid.ny - 1

    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.zeros(n)]
    diag = vals[0]

    def arm(mask, vel, shift, h, sign):
        # sign +1: upwind neighbor enters with -|v|/h, diagonal with +|v|/h
        keep = mask & (vel != 0.0)
        diag[keep] += sign * vel[keep] / h
        rows.append(np.flatnonzero(keep))
        cols.append(np.flatnonzero(keep) + shift)
        vals.append(-sign * vel[keep] / h)

    arm(has_w, vxp, -1, grid.hx, +1.0)          # vx > 0 pulls from the west
    arm(has_e, vxm, +1, grid.hx, -1.0)          # vx < 0 pulls from the east
    arm(has_s, vyp, -grid.nx, grid.hy, +1.0)    # vy > 0 pulls from the south
    arm(has_n, vym, +grid.nx, grid.hy, -1.0)    # vy < 0 pulls from the north

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass
class PriorOperator:
    """Gamma_pr = A^{-2} with A = -theta*Lap + alpha*I, homogeneous Neumann.

    One `sqrt_apply` solves (theta*L + alpha*M) v = M s by CG, i.e. applies
    A^{-1}; the full covariance is sqrt_apply twice.  Solves are counted on
    an elliptic-solve counter separate from the PDE-solve counter.
    """

    grid: Grid2D
    theta: float = 0.002
    alpha: float = 0.1
    cg_tol: float = 1e-10
    cg_max_iter: int = 1000
    solves: SolveCounter = field(default_factory=SolveCounter)

    def __post_init__(self):
        if self.theta <= 0 or self.alpha <= 0:
            raise ContractError("theta and alpha must be positive")
        mass = self.grid.hx * self.grid.hy
        self._matrix = (self.theta * prior_stiffness(self.grid)
                        + self.alpha * mass * sp.identity(self.grid.n)).tocsr()

    @property
    def matrix(self):
        return self._matrix

    def sqrt_apply(self, s):
        """Apply A^{-1} (one square-root factor of the covariance)."""
        s = np.asarray(s, float)
        mass = self.grid.hx * self.grid.hy
        cols = 1 if s.ndim == 1 else s.shape[1]
        self.solves.add(cols)
        return cg_solve(self._matrix, mass * s, tol=self.cg_tol,
                        max_iter=self.cg_max_iter)


@dataclass(frozen=True)
class ObservationSetup:
    """Candidate sensors (grid flat indices), observation times, noise levels.

    Observation vectors are time-major: entry t*n_sensors + sensor_index.
    """

    sensor_nodes: tuple
    obs_times: tuple
    sigmas: tuple

    def __post_init__(self):
        if len(self.sensor_nodes) < 1 or len(self.obs_times) < 1:
            raise ContractError("need at least one sensor and one observation time")
        if len(set(self.sensor_nodes)) != len(self.sensor_nodes):
            raise ContractError("sensor nodes must be distinct")
        if any(t2 <= t1 for t1, t2 in zip(self.obs_times, self.obs_times[1:])):
            raise ContractError("observation times must be strictly increasing")
        if len(self.sigmas) != len(self.sensor_nodes):
            raise ContractError("need one noise level per sensor")
        if any(s <= 0 for s in self.sigmas):
            raise ContractError("noise standard deviations must be positive")

    @property
    def n_sensors(self):
        return len(self.sensor_nodes)

    @property
    def n_times(self):
        return len(self.obs_times)

    @property
    def n_obs(self):
        return self.n_sensors * self.n_times


def sensor_lattice(grid, per_axis):
    """Flat indices of a per_axis x per_axis lattice of interior nodes."""
    xi = np.round(np.linspace(0, grid.nx - 1, per_axis + 2)[1:-1]).astype(int)
    yi = np.round(np.linspace(0, grid.ny - 1, per_axis + 2)[1:-1]).astype(int)
    nodes = [grid.flat_index(i, j) for j in yi for i in xi]
    if len(set(nodes)) != len(nodes):
        raise ContractError("sensor lattice is too dense for this grid")
    return tuple(nodes)


class ModelProblem:
    """Bundles model, prior and observations; owns the PDE-solve counter."""

    def __init__(self, model, prior, obs):
        if prior.grid != model.grid:
            raise ContractError("model and prior must share a grid")
        grid = model.grid
        for node in obs.sensor_nodes:
            if not 0 <= node < grid.n:
                raise ContractError(f"sensor node {node} outside the grid")
        steps = []
        for t in obs.obs_times:
            k = t / model.dt
            if abs(k - round(k)) > 1e-9:
                raise ContractError(f"observation time {t} is not a multiple of dt")
            k = int(round(k))
            if not 1 <= k <= model.n_steps:
                raise ContractError(f"observation time {t} outside (0, t_final]")
            steps.append(k)

        self.model = model
        self.prior = prior
        self.obs = obs
        self.grid = grid
        self.obs_steps = tuple(steps)
        self.mass_diag = np.full(grid.n, grid.hx * grid.hy)
        self.pde_solves = SolveCounter()

        self._implicit = (sp.identity(grid.n)
                          + model.dt * model.kappa * neumann_laplacian(grid)).tocsr()
        self._advect = upwind_advection(grid, model.velocity_amplitude)
        self._advect_t = self._advect.T.tocsr()
        self._sensor_idx = np.asarray(obs.sensor_nodes, dtype=int)

    @property
    def n(self):
        return self.grid.n

    @property
    def n_obs(self):
        return self.obs.n_obs

    def _diffuse(self, rhs, x0=None):
        return cg_solve(self._implicit, rhs, tol=self.prior.cg_tol,
                        max_iter=self.prior.cg_max_iter, x0=x0)

    def forward(self, m0):
        """Time-march initial states (columns) and record sensor values.

        Returns the (n_obs,) vector or (n_obs, k) block in time-major order;
        counts one PDE solve per column.
        """
        m0 = np.asarray(m0, float)
        single = m0.ndim == 1
        U = m0[:, None].copy() if single else m0.copy()
        self.pde_solves.add(U.shape[1])

        out = np.empty((self.n_obs, U.shape[1]))
        ns = self.obs.n_sensors
        step_to_block = {s: b for b, s in enumerate(self.obs_steps)}
        dt = self.model.dt
        for k in range(1, self.model.n_steps + 1):
            rhs = U - dt * (self._advect @ U)
            U = self._diffuse(rhs, x0=U)
            b = step_to_block.get(k)
            if b is not None:
                out[b * ns:(b + 1) * ns] = U[self._sensor_idx]
        return out[:, 0] if single else out

    def forward_adjoint(self, y):
        """Adjoint of `forward` under the mass-weighted domain inner product:
        <F m, y> = <m, F* y>_M.  Exact transpose of each IMEX step, run in
        reverse; one PDE solve per column."""
        y = np.asarray(y, float)
        single = y.ndim == 1
        Y = y[:, None] if single else y
        self.pde_solves.add(Y.shape[1])

        lam = np.zeros((self.n, Y.shape[1]))
        ns = self.obs.n_sensors
        step_to_block = {s: b for b, s in enumerate(self.obs_steps)}
        dt = self.model.dt
        for k in range(self.model.n_steps, 0, -1):
            b = step_to_block.get(k)
            if b is not None:
                lam[self._sensor_idx] += Y[b * ns:(b + 1) * ns]
            lam = self._diffuse(lam)
            lam = lam - dt * (self._advect_t @ lam)
        lam /= self.mass_diag[:, None]
        return lam[:, 0] if single else lam

    # ---- operators ------------------------------------------------------

    def forward_operator(self):
        """F: parameters (mass-weighted domain) -> observations (Euclidean)."""
        return _ForwardOperator(self)

    def prior_sqrt_operator(self):
        """Gamma_pr^{1/2} = A^{-1} on nodal vectors (mass-weighted domain)."""
        prob = self

        def apply_block(X):
            return prob.prior.sqrt_apply(X)

        op = SymmetricOperator(self.n, apply_block, counter=self.prior.solves)
        op.domain_weight = self.mass_diag
        return op

    def z_operator(self):
        """Z = M^{1/2} Gamma_pr M^{-1/2}: Euclidean-symmetric, costs prior
        solves only."""
        prob = self
        root = np.sqrt(self.mass_diag)

        def apply_block(X):
            t = prob.prior.sqrt_apply(X * (1.0 / root)[:, None])
            t = prob.prior.sqrt_apply(t)
            return root[:, None] * t

        return SymmetricOperator(self.n, apply_block)

    def fcal_operator(self):
        """Preconditioned forward map F Gamma_pr^{1/2} M^{-1/2}; Euclidean on
        both sides, one PDE solve per column in each direction."""
        return _PreconditionedForward(self)

    # ---- identification --------------------------------------------------

    def content_dict(self):
        return {
            "nx": self.grid.nx, "ny": self.grid.ny,
            "kappa": self.model.kappa,
            "velocity_amplitude": self.model.velocity_amplitude,
            "dt": self.model.dt, "t_final": self.model.t_final,
            "theta": self.prior.theta, "alpha": self.prior.alpha,
            "cg_tol": self.prior.cg_tol,
            "sensor_nodes": list(map(int, self.obs.sensor_nodes)),
            "obs_times": list(map(float, self.obs.obs_times)),
            "sigmas": list(map(float, self.obs.sigmas)),
        }

    def content_hash(self):
        blob = json.dumps(self.content_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class _ForwardOperator(LinearOperator):
    def __init__(self, problem):
        super().__init__(problem.n_obs, problem.n,
                         domain_weight=problem.mass_diag,
                         counter=problem.pde_solves, apply_cost=0)
        # pde accounting happens inside forward()/forward_adjoint()
        self.problem = problem

    def _apply(self, X):
        return self.problem.forward(X)

    def _apply_adjoint(self, Y):
        return self.problem.forward_adjoint(Y)


class _PreconditionedForward(LinearOperator):
    def __init__(self, problem):
        super().__init__(problem.n_obs, problem.n,
                         counter=problem.pde_solves, apply_cost=0)
        self.problem = problem
        self._inv_root_mass = 1.0 / np.sqrt(problem.mass_diag)
        self._root_mass = np.sqrt(problem.mass_diag)

    def _apply(self, X):
        m = self.problem.prior.sqrt_apply(self._inv_root_mass[:, None] * X)
        return self.problem.forward(m)

    def _apply_adjoint(self, Y):
        lam = self.problem.forward_adjoint(Y)
        return self._root_mass[:, None] * self.problem.prior.sqrt_apply(lam)


def reference_problem(nx=8, ny=None, sensors_per_axis=3, kappa=0.01,
                      velocity_amplitude=2.0, dt=0.02, t_final=1.0,
                      obs_times=(0.2, 0.6, 1.0), theta=0.002, alpha=0.1,
                      cg_tol=1e-13, cg_max_iter=2000, sigma=None,
                      relative_noise=0.02):
    """Desk-scale reference problem used by the tests and demos.

    When `sigma` is None the noise level is the given fraction of the peak
    noise-free signal generated by the standard two-bump initial condition
    (computed on a throwaway instance so the returned problem has clean
    solve counters).
    """
    grid = Grid2D(nx, ny if ny is not None else nx)
    model = AdvDiffModel(grid, kappa=kappa, velocity_amplitude=velocity_amplitude,
                         dt=dt, t_final=t_final)
    nodes = sensor_lattice(grid, sensors_per_axis)

    def build(sigmas):
        prior = PriorOperator(grid, theta=theta, alpha=alpha,
                              cg_tol=cg_tol, cg_max_iter=cg_max_iter)
        obs = ObservationSetup(nodes, tuple(obs_times), tuple(sigmas))
        return ModelProblem(model, prior, obs)

    if sigma is None:
        probe = build([1.0] * len(nodes))
        data = probe.forward(two_bump_field(grid))
        sigma = relative_noise * float(np.max(np.abs(data)))
    return build([float(sigma)] * len(nodes))


def two_bump_field(grid, centers=((0.35, 0.7), (0.7, 0.3)), width=0.12,
                   amplitude=1.0):
    """Sum of two Gaussian bumps; the synthetic 'true' initial condition."""
    x, y = grid.coordinates()
    out = np.zeros(grid.n)
    for cx, cy in centers:
        out += amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width**2))
    return out
