"""Multiview multimodal video transformer for verb/noun action recognition, on a numpy autodiff core."""

from .model import ModelConfig, MMModel, forward, init_params, load_checkpoint, save_checkpoint, tiny_config
from .model_spec import ModelSpec, ViewSpec, format_model_spec, parse_model_spec, token_geometry

__version__ = "0.1.0"

__all__ = [
    "MMModel",
    "ModelConfig",
    "ModelSpec",
    "ViewSpec",
    "format_model_spec",
    "forward",
    "init_params",
    "load_checkpoint",
    "parse_model_spec",
    "save_checkpoint",
    "tiny_config",
    "token_geometry",
]
