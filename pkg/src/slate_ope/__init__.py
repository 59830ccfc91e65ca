"""Counterfactual evaluation of sequential slate recommendations."""
from .core import (
    Context,
    Dataset,
    DataValidationError,
    DegenerateWeightsError,
    LoggedImpression,
    OverlapError,
    Policy,
    effective_sample_size,
    importance_weights,
    load_jsonl,
    per_position_weight,
    save_jsonl,
)
from .estimators import (
    EstimateReport,
    RipsConfig,
    ZeroMassError,
    iips,
    iips_normalized,
    ips,
    nis,
    on_policy_mean,
    rips,
    rips_closed_form,
)
from .policies import ScoreSortedPolicy, SoftmaxPolicy, UniformRandomPolicy, policy_from_config
from .simulator import CascadeRewardModel, SimWorld, generate_world, log_impressions, sample_rewards, true_value

__version__ = "0.1.0"
