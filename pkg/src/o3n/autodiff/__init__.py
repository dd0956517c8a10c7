from .checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .functional import (
    add,
    affine,
    combine_branches,
    concat,
    conv2d,
    dropout,
    flatten,
    log_softmax,
    maxpool,
    mul,
    relu,
    reshape,
    softmax,
    softmax_xent,
    total,
)
from .gradcheck import grad_check, relative_error
from .optim import SGD, global_norm, sgd_step
from .tensor import ParamSet, Tensor, as_tensor, parameter

__all__ = [
    "Checkpoint",
    "ParamSet",
    "SGD",
    "Tensor",
    "add",
    "affine",
    "as_tensor",
    "combine_branches",
    "concat",
    "conv2d",
    "decode_checkpoint",
    "dropout",
    "encode_checkpoint",
    "flatten",
    "global_norm",
    "grad_check",
    "load_checkpoint",
    "log_softmax",
    "maxpool",
    "mul",
    "parameter",
    "relative_error",
    "relu",
    "reshape",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "softmax_xent",
    "total",
]
