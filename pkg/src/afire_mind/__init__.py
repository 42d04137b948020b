"""Fusion-agnostic fMRI encoding with a subject-aware sparse MoE decoder."""

from .estimator import MINDRegressor
from .mind import MINDNetwork
from .synthgen import generate, oracle_ceiling, recovery_score

__all__ = ["MINDRegressor", "MINDNetwork", "generate", "oracle_ceiling", "recovery_score"]
__version__ = "0.1.0"
