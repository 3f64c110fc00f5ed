"""Continual learning for a toy image/text dual encoder.

Grouped-Fisher EWC with adaptive weights, a cross-modal consistency penalty and
low-rank adapters, plus the baselines and metrics to compare them.
"""

from .adapt import AdapterSpec, attach_adapters, freeze_hierarchy, merge_adapters
from .encoder import DualEncoder, ModelConfig, Pair, contrastive_loss, embed_text, embed_visual
from .errors import (
    ContractError,
    DimensionError,
    InputError,
    ModalAnchorError,
    NumericError,
    ParameterError,
    ParseError,
    ValidationError,
)
from .metrics import backward_transfer, forgetting_rate, forward_transfer, retrieval_accuracy
from .regularize import EWCPenalty, combined_loss, consistency_loss, estimate_fisher, ewc_penalty
from .taskgen import StreamTemplate, generate_task_stream, load_pairs, save_pairs
from .trainer import Strategy, TrainConfig, load_checkpoint, run_sequence, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec",
    "ContractError",
    "DimensionError",
    "DualEncoder",
    "EWCPenalty",
    "InputError",
    "ModalAnchorError",
    "ModelConfig",
    "NumericError",
    "Pair",
    "ParameterError",
    "ParseError",
    "Strategy",
    "StreamTemplate",
    "TrainConfig",
    "ValidationError",
    "attach_adapters",
    "backward_transfer",
    "combined_loss",
    "consistency_loss",
    "contrastive_loss",
    "embed_text",
    "embed_visual",
    "estimate_fisher",
    "ewc_penalty",
    "forgetting_rate",
    "forward_transfer",
    "freeze_hierarchy",
    "generate_task_stream",
    "load_checkpoint",
    "load_pairs",
    "merge_adapters",
    "retrieval_accuracy",
    "run_sequence",
    "save_checkpoint",
    "save_pairs",
]
