from .gradcheck import gradient_check, parameter_gradient_check, relative_error
from .nn import MLP, LayerNorm, Linear, Module, mlp_forward, uniform_init
from .ops import (
    add,
    bce_with_logits,
    concat,
    div,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    row_softmax,
    scale,
    sub,
    sum_all,
    transpose,
)
from .optim import adamw_step
from .rng import stream
from .tensor import Parameter, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "MLP", "LayerNorm", "Linear", "Module", "Parameter", "Tensor",
    "adamw_step", "add", "as_tensor", "bce_with_logits", "concat", "div", "exp",
    "gather_rows", "gelu", "grad_enabled", "gradient_check", "layer_norm",
    "matmul", "mean", "mlp_forward", "mul", "no_grad", "parameter_gradient_check",
    "relative_error", "reshape", "row_softmax", "scale", "stream", "sub",
    "sum_all", "transpose", "uniform_init",
]
