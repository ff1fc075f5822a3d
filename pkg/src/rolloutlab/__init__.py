"""Desk-scale RL rollout laboratory.

Speculative reuse of cached previous-epoch rollouts under a lenience-modulated
acceptance rule, a toy verifiable-reward training loop, redundancy metrics,
and brute-force distribution oracles that make the fidelity properties of the
sampler exactly checkable.
"""

from .cache import CachedRollout, CacheLoadError, RolloutCache
from .metrics import OverlapReport, epoch_overlap, kl_estimate, rouge1, write_metrics_csv
from .oracle import (
    enumerate_direct,
    enumerate_spec,
    load_distribution,
    save_distribution,
    tv_distance,
)
from .policy import (
    DivergenceError,
    Policy,
    Trajectory,
    UpdateConfig,
    UpdateStats,
    Vocab,
    load_policy,
    policy_entropy,
    save_policy,
    surrogate_objective,
    update,
)
from .rng import substream
from .speculative import (
    ConfigError,
    InternalInvariantError,
    Lenience,
    VerificationResult,
    acceptance_probs,
    find_rejection,
    residual_dist,
    resume,
    speculative_rollout,
)
from .trainer import (
    EpochMetrics,
    ExperimentResult,
    ModularSumTask,
    StepRecord,
    TrainConfig,
    group_advantages,
    reward,
    rollout_batch,
    run_experiment,
)

__all__ = [
    "CachedRollout",
    "CacheLoadError",
    "RolloutCache",
    "OverlapReport",
    "epoch_overlap",
    "kl_estimate",
    "rouge1",
    "write_metrics_csv",
    "enumerate_direct",
    "enumerate_spec",
    "load_distribution",
    "save_distribution",
    "tv_distance",
    "DivergenceError",
    "Policy",
    "Trajectory",
    "UpdateConfig",
    "UpdateStats",
    "Vocab",
    "load_policy",
    "policy_entropy",
    "save_policy",
    "surrogate_objective",
    "update",
    "substream",
    "ConfigError",
    "InternalInvariantError",
    "Lenience",
    "VerificationResult",
    "acceptance_probs",
    "find_rejection",
    "residual_dist",
    "resume",
    "speculative_rollout",
    "EpochMetrics",
    "ExperimentResult",
    "ModularSumTask",
    "StepRecord",
    "TrainConfig",
    "group_advantages",
    "reward",
    "rollout_batch",
    "run_experiment",
]
