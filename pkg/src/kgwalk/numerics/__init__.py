from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .lstm import init_lstm_weights, lstm_cell, xavier_uniform
from .optim import AdamState, adam_step, clip_by_global_norm
from .tensor import ContractError, NumericError, ShapeError, Tape, Tensor, backward

__all__ = [
    "AdamState",
    "CheckpointError",
    "ContractError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "clip_by_global_norm",
    "init_lstm_weights",
    "load_checkpoint",
    "lstm_cell",
    "save_checkpoint",
    "xavier_uniform",
]
