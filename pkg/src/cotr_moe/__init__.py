"""Conditional token reduction + mixture-of-LoRA-experts, at desk scale.

A minimal tensor engine with reverse-mode differentiation, the text- and
cross-expert-conditioned token reducer, the multimodal-routed LoRA expert
mixture, a toy multimodal decoder with the three-stage freeze schedule,
and the token/FLOPs accounting that goes with them.
"""

__version__ = "0.1.0"

from .cotr import ConsolidatedTokens, CotrConfig, ExpertShape, TokenReducer
from .mmoe import (
    LoraExpert,
    MmoeConfig,
    MmoeLayer,
    RouteDecision,
    UsageRecorder,
    balance_loss,
    expert_usage,
    mmoe_forward,
    soft_mmoe_forward,
)
from .stack import (
    LmConfig,
    MultimodalModel,
    StackConfig,
    StagePlan,
    build_model,
    evaluate,
    train_stage,
)
from .tensor import Tape, Tensor, backward, finite_diff_check

__all__ = [
    "ConsolidatedTokens", "CotrConfig", "ExpertShape", "TokenReducer",
    "LoraExpert", "MmoeConfig", "MmoeLayer", "RouteDecision", "UsageRecorder",
    "balance_loss", "expert_usage", "mmoe_forward", "soft_mmoe_forward",
    "LmConfig", "MultimodalModel", "StackConfig", "StagePlan", "build_model",
    "evaluate", "train_stage", "Tape", "Tensor", "backward",
    "finite_diff_check",
]
