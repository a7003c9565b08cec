"""Swarm task allocation against learned or closed-form bid densities."""

from .allocator import AllocParams, allocate
from .amf import amf_binned, amf_binned_all, amf_density_at
from .core import (
    Allocation,
    BidMatrix,
    BinGrid,
    Robot,
    Scenario,
    Task,
    Workspace,
    bid,
    characteristic_length,
    compute_bid_matrix,
    coverage,
    global_objective,
    histogram_density,
)
from .estimators import AmfEstimator, ExactAllocator, FormicaEstimator, evaluate
from .harness import ExperimentConfig, paired_stats, run_experiment
from .scenario import GenConfig, generate, generate_batch, preset
from .solver import ExactConfig, solve_exact, solve_exhaustive
from .training import TrainConfig, train

__version__ = "0.1.0"
