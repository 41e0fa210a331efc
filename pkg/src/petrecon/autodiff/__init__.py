"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from petrecon.autodiff.gradcheck import grad_check, param_grad_check, relative_error
from petrecon.autodiff.linop import LinearOperator, linear_operator_node
from petrecon.autodiff.ops import (
    add,
    as_tensor,
    batch_norm,
    concat_channels,
    conv2d,
    dot,
    max_pool2,
    mean,
    mul,
    relu,
    reshape,
    scalar_mul,
    square,
    sub,
    sum,
    upsample_bilinear2,
)
from petrecon.autodiff.tensor import Gradients, Parameter, Tape, Tensor, backward, set_debug

__all__ = [
    "Gradients", "LinearOperator", "Parameter", "Tape", "Tensor", "add", "as_tensor",
    "backward", "batch_norm", "concat_channels", "conv2d", "dot", "grad_check",
    "linear_operator_node", "max_pool2", "mean", "mul", "param_grad_check",
    "relative_error", "relu", "reshape", "scalar_mul", "set_debug", "square", "sub", "sum",
    "upsample_bilinear2",
]
