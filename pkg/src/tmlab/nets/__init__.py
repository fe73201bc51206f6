"""Minimal differentiable networks with a hand-written reverse-mode engine."""

from tmlab.nets.autodiff import NonFiniteError, Tensor, no_grad
from tmlab.nets.grad import finite_difference_grad, grad, max_relative_error, value_and_grad
from tmlab.nets.models import (
    NULL_CLASS,
    BackboneConfig,
    HeadConfig,
    ModelConfig,
    backbone_forward,
    fm_forward,
    head_forward,
    init_params,
)
from tmlab.nets.optim import AdamState, adam_step
from tmlab.nets.params import NetParams, load_checkpoint, save_checkpoint

__all__ = [
    "NULL_CLASS",
    "AdamState",
    "BackboneConfig",
    "HeadConfig",
    "ModelConfig",
    "NetParams",
    "NonFiniteError",
    "Tensor",
    "adam_step",
    "backbone_forward",
    "finite_difference_grad",
    "fm_forward",
    "grad",
    "head_forward",
    "init_params",
    "load_checkpoint",
    "max_relative_error",
    "no_grad",
    "save_checkpoint",
    "value_and_grad",
]
