"""Trimap-prior windowed-attention image matting at desk scale."""

from .attention import PriorMode
from .config import (ModelConfig, TrainConfig, load_config, save_config,
                     tiny_model_config, toy_model_config)
from .model import MattingModel, count_params
from .tensor import Tensor, Parameter, no_grad, use_dtype

__all__ = [
    "MattingModel", "ModelConfig", "Parameter", "PriorMode", "Tensor",
    "TrainConfig", "count_params", "load_config", "no_grad", "save_config",
    "tiny_model_config", "toy_model_config", "use_dtype",
]
