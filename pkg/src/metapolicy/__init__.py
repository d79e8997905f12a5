"""Meta-policy composition over basis policies, with the car and hybrid-control domains."""

from .core import Env, Policy, RolloutBatch, Trajectory, batch_rollouts, discounted_returns, mean_return, rollout
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    GenerationError,
    MetaPolicyError,
    NumericError,
)

__all__ = [
    "Env",
    "Policy",
    "RolloutBatch",
    "Trajectory",
    "batch_rollouts",
    "discounted_returns",
    "mean_return",
    "rollout",
    "CheckpointError",
    "ConfigError",
    "DomainError",
    "GenerationError",
    "MetaPolicyError",
    "NumericError",
]

__version__ = "0.1.0"
