"""Iterative computation of Cramer-Rao bound entries.

Entries of ``J^{-1}``, ``J^+`` or the constrained bound ``U (U^T J U)^{-1} U^T``
are obtained as minimizers of quadratic matrix programs, so a few iterations
of a preconditioned solver replace a full inversion. The ``fss`` module
applies this to choosing the sampling rate of a flow-sampling sketch.
"""
from .constrained import (ConstrainedQmpProblem, ConstraintSet, NullBasis,
                          constrained_crb_oracle, constrained_crb_via_inverse,
                          gs_two_solve_composition, null_basis, solve_constrained_mm,
                          solve_constrained_pcg, solve_gradient_projection)
from .errors import (CRBError, DimensionMismatch, Divergence, InfeasibleStart, InternalError,
                     InvalidStep, MonotonicityViolation, NotInRange, NotPositiveDefinite,
                     RankDeficientConstraints, SingularReducedFisher, TruncationError,
                     WeightUnderflow)
from .fss import (FlowModel, crb_at_rate, fss_fisher, load_distribution, load_gradient,
                  optimal_rate, truncation_K, zipf_distribution, breakeven_report)
from .matrix import (SymMatrix, direct_solve, iteration_matrix_radius, matvec,
                     power_extremes, pseudoinverse_apply)
from .precond import Preconditioner
from .singular import SingularProblem, solve_cg_normal, solve_landweber
from .solvers import (QmpProblem, SolveReport, iterations_to_within, objective, solve_gd,
                      solve_mm, stopping_rule)

__version__ = "0.1.0"
