"""Discrete-event simulation and closed-form verification tools for
asynchronous federated optimization with heterogeneous clients."""

__version__ = "0.1.0"

from .core import (
    ClientSpec,
    ConfigurationError,
    Contribution,
    Fleet,
    GlobalModel,
    InvalidWeightsError,
    NumericOverflowError,
    SeedCollisionError,
    SnapshotsUnavailableError,
    StalenessCapError,
    UnsupportedConfigError,
    WeightKind,
    WeightVector,
    convergence_residual,
    distribution_weights,
    federated_loss,
    surrogate_loss,
    uniform_importances,
    weighted_optimum,
)
from .engine import RunConfig, Seeds, Trajectory, run, run_ensemble, run_scalar_ensemble
from .objectives import (
    GlmObjective,
    QuadraticObjective,
    SyntheticShardConfig,
    batch_gradient,
    local_sgd,
    make_synthetic_shards,
)
from .oracle import OracleState, expectation_recursion, expected_round_time, phi, staleness_law, variance_recursion
from .timing import FleetState, HardwareModel, PolicyKind, WaitPolicy, advance_round, sampler_covariance, staleness_bound
from .weights import WeightPlan, WeightScheme, chi_square_bias, plan_weights, verify_window_assumption, window_size
