"""Desk-scale lab for pruning pre-trained weights using only LoRA adapter gradients."""

from .errors import (ConfigError, DimensionError, FormatError, InputError, InvariantError, LabError,
                     NonFiniteError, UsageError)
from .lora import Linear, LoraModule, attach_lora
from .models import Model, ModelSpec
from .tensor import Tape, Tensor, backward, sgd_step

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "InputError", "InvariantError", "LabError",
    "Linear", "LoraModule", "Model", "ModelSpec", "NonFiniteError", "Tape", "Tensor", "UsageError",
    "attach_lora", "backward", "sgd_step",
]
