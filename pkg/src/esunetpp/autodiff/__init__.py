from .functional import (
    RunningStats,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    max_pool2d,
    relu,
    sigmoid,
)
from .gradcheck import grad_check
from .optim import Adam, OptimizerState, optimizer_step
from .serialization import decode_tsr, encode_tsr, load_tsr, save_tsr
from .tensor import (
    GradTape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    clip,
    div,
    exp,
    is_grad_enabled,
    log,
    mean,
    mul,
    no_grad,
    power,
    reshape,
    sub,
    tsum,
)

__all__ = [
    "Adam", "GradTape", "OptimizerState", "RunningStats", "Tensor",
    "absolute", "add", "as_tensor", "backward", "batch_norm", "clip", "concat_channels",
    "conv2d", "conv_transpose2d", "decode_tsr", "div", "encode_tsr", "exp",
    "grad_check", "is_grad_enabled", "load_tsr", "log", "max_pool2d", "mean",
    "mul", "no_grad", "optimizer_step", "power", "relu", "reshape", "save_tsr",
    "sigmoid", "sub", "tsum",
]
