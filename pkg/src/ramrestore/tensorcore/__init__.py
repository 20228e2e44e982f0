from .io import decode_tensor, encode_tensor, load_tensor, save_tensor
from .optim import AdamState, adam_step, cosine_lr
from .tensor import (
    Gradients,
    Tensor,
    absolute,
    add,
    add_bias,
    as_tensor,
    backward,
    conv2d,
    grad,
    is_recording,
    leaky_relu,
    mean,
    mul,
    no_grad,
    scale,
    sub,
    sum,
)

__all__ = [
    "AdamState", "Gradients", "Tensor", "absolute", "adam_step", "add", "add_bias",
    "as_tensor", "backward", "conv2d", "cosine_lr", "decode_tensor", "encode_tensor",
    "grad", "is_recording", "leaky_relu", "load_tensor", "mean", "mul", "no_grad",
    "save_tensor", "scale", "sub", "sum",
]
