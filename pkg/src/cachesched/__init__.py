"""Joint cache placement and BS multicast scheduling over a finite file lifetime."""
from .bounds import BoundCalculator, BoundsReport, g_max, pi_step
from .learning import EventBatch, LearnerState, init_learner, learn, learning_events, observe
from .model import (CacheNode, CacheState, ConstraintViolation, FileLibrary, NetworkModel,
                    RequestState, ScheduleDecision, UserRegion, default_model, stage_cost,
                    validate_decision)
from .numerics import (CostKernelParams, InfeasibleRateError, delivery_cost, lambert_w,
                       min_delivery_cost, stage_budget, tail_mass, tail_prob, theta)
from .oracle import DiscreteInstance, ExactSolution, bellman_residual, solve_exact
from .scheduler import ConfigurationError, PolicyKind, make_policy, schedule_proposed
from .sim import ExperimentConfig, emit_plot_data, prepare, run_episode, run_sweep
from .stats import estimate_region_statistics, sample_channels
from .tables import ValueTables, build_tables, horizon_for

__version__ = "0.1.0"
