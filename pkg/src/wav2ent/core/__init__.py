"""Minimal shaped-array autodiff, layers and optimizer."""

from . import functional
from .gradcheck import grad_check
from .layers import LayerNorm, Linear, Module, MultiHeadAttention, TransformerBlock, sinusoidal_positions, transformer_block
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, backward, computation_record, no_grad

__all__ = [
    "Adam", "AdamState", "LayerNorm", "Linear", "Module", "MultiHeadAttention", "Tensor",
    "TransformerBlock", "adam_step", "backward", "computation_record", "functional",
    "grad_check", "no_grad", "sinusoidal_positions", "transformer_block",
]
