"""Minimal reverse-mode autodiff over numpy arrays."""
from . import ops
from .gradcheck import grad_check, numeric_grad
from .nn import (Attention, Block, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mlp, Module,
                 Parameter)
from .ops import forward_op
from .optim import AdamW, OptimizerState, layer_decay_multipliers, optimizer_step
from .tensor import (ContractError, DimensionError, NumericsError, OpGraph, Tensor,
                     UnsupportedOpError, backward, default_dtype, is_grad_enabled, no_grad,
                     precision)

__all__ = [
    "ops", "grad_check", "numeric_grad", "Attention", "Block", "Conv2d", "ConvTranspose2d",
    "LayerNorm", "Linear", "Mlp", "Module", "Parameter", "forward_op", "AdamW", "OptimizerState",
    "layer_decay_multipliers", "optimizer_step", "ContractError", "DimensionError", "NumericsError",
    "OpGraph", "Tensor", "UnsupportedOpError", "backward", "default_dtype", "is_grad_enabled",
    "no_grad", "precision",
]
