"""Mixture-of-experts transformer with attention-driven dynamic expert counts."""

from .attention import AttentionParams, mhsa_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig
from .estimators import DAMoEClassifier, DAMoELanguageModel, TokenImportanceTransformer
from .exceptions import (
    CheckpointError,
    ComparisonError,
    ConfigError,
    ContractError,
    DAMoEError,
    DimensionError,
    IngestionError,
    NumericalAbort,
)
from .importance import compute_token_importance, experts_per_token
from .model import DAMoEModel
from .moe import ExpertParams, moe_forward
from .router import CapacityConfig, RouterParams, RoutingPlan, route_dynamic, route_fixed

__version__ = "0.1.0"

__all__ = [
    "AttentionParams",
    "CapacityConfig",
    "CheckpointError",
    "ComparisonError",
    "ConfigError",
    "ContractError",
    "DAMoEClassifier",
    "DAMoEError",
    "DAMoELanguageModel",
    "DAMoEModel",
    "DimensionError",
    "ExpertParams",
    "IngestionError",
    "ModelConfig",
    "NumericalAbort",
    "RouterParams",
    "RoutingPlan",
    "RunConfig",
    "TokenImportanceTransformer",
    "compute_token_importance",
    "experts_per_token",
    "load_checkpoint",
    "mhsa_forward",
    "moe_forward",
    "route_dynamic",
    "route_fixed",
    "save_checkpoint",
]
