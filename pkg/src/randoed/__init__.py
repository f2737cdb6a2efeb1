"""Randomized A-optimal sensor placement for Bayesian linear inverse problems.

A matrix-free toolkit: an advection-diffusion transport model with exact
discrete adjoints, randomized subspace-iteration estimators for the A-optimal
and modified A-optimal design criteria and their gradients, theoretical error
bounds, and a reweighted-l1 majorize-minimize optimizer that produces sparse
binary sensor configurations.
"""

from .errors import (AssumptionError, CapExceededError, ConfigError,
                     ContractError, DescentError, NumericalError, SolverError)
from .linops import (DenseOperator, DiagonalOperator, IdentityOperator,
                     LinearOperator, SolveCounter, SymmetricOperator,
                     adjoint_test, cg_solve, materialize_dense, operator_norm,
                     read_matrix_csv, write_matrix_csv)
from .model import (AdvDiffModel, Grid2D, ModelProblem, ObservationSetup,
                    PriorOperator, reference_problem, sensor_lattice,
                    two_bump_field, velocity_eval)
from .sketch import (LowRankFactors, SketchConfig, factorize_T,
                     sample_gaussian, subspace_iteration)
from .criteria import (BoundReport, EstimatorReport, ExactEvaluator,
                       NoiseWeights, PrecomputedS, bayes_risk_mc,
                       bound_constant, eigk_factors, exact_reference,
                       frozen_svd, gradient_bound_value, misfit_hessian,
                       precompute_s, randomized_aopt, randomized_moda,
                       theorem_bound)
from .design_opt import (InnerSettings, OptRun, OptimizerConfig, PenaltyConfig,
                         binariness_metric, inner_solve, mm_loop, penalty_eval,
                         reweight)

__version__ = "0.1.0"
