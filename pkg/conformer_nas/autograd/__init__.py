from .tensor import (
    Function,
    Tape,
    TapeRecord,
    Tensor,
    as_tensor,
    backward,
    concat,
    current_tape,
    is_recording,
    no_grad,
    reset_tape,
)
from .functional import (
    add,
    batch_norm,
    depthwise_conv1d,
    dropout,
    glu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mul,
    receptive_field,
    relu,
    sigmoid,
    sinusoidal_table,
    softmax,
    swish,
)

__all__ = [
    "Function",
    "Tape",
    "TapeRecord",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "current_tape",
    "is_recording",
    "no_grad",
    "reset_tape",
    "add",
    "batch_norm",
    "depthwise_conv1d",
    "dropout",
    "glu",
    "layer_norm",
    "linear",
    "log_softmax",
    "matmul",
    "mul",
    "receptive_field",
    "relu",
    "sigmoid",
    "sinusoidal_table",
    "softmax",
    "swish",
]
