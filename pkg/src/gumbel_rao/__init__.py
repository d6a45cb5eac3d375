"""Gumbel-Rao gradient estimators for categorical random variables.

Single-evaluation estimators (REINFORCE, Gumbel-Softmax, straight-through,
straight-through Gumbel-Softmax and Monte Carlo Gumbel-Rao), surrogate-loss
stochastic computation graphs, enumeration oracles, and the quadratic
program experiments on the simplex.
"""

from .estimators import (
    ESTIMATORS,
    BaselineState,
    GradientEstimate,
    InstrumentedObjective,
    ObjectiveSpec,
    constant_objective,
    estimate,
    estimate_grmc,
    estimate_grmc_minibatched,
    estimate_gs,
    estimate_reinforce,
    estimate_st,
    estimate_stgs,
    linear_objective,
    parse_estimator,
    quadratic_objective,
    random_table_objective,
)
from .experiments import QpSpec, build_a_matrix, simplex_grid, solve_qp, train_qp, variance_map
from .gumbel_core import (
    DimensionError,
    OneHotSample,
    PerturbedLogits,
    RngStream,
    sample_categorical_gumbel_max,
    sample_gumbel,
    sample_posterior_gumbels,
    tempered_softmax,
    tempered_softmax_jacobian,
)
from .oracle import (
    CapacityError,
    EstimatorStats,
    compare_paired,
    decompose_variance,
    exact_gradient,
    exact_parallel_gradient,
    exact_sequential_gradient,
    measure_stats,
)
from .scg import (
    LinkFunction,
    StopGradient,
    Surrogate,
    backward_parallel,
    backward_sequential,
    forward_parallel,
    forward_sequential,
)

__version__ = "0.1.0"
