from . import array, layers, presets
from .array import Array, concat, enable_grad, grad, no_grad
from .network import (
    CheckpointError,
    GradError,
    NetworkSpec,
    ParameterSet,
    ShapeError,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamState, NonFiniteGradient, adam_step, sgd_step

__all__ = [
    "Array", "AdamState", "CheckpointError", "GradError", "NetworkSpec", "NonFiniteGradient",
    "ParameterSet", "ShapeError", "adam_step", "array", "backward", "concat", "enable_grad",
    "forward", "grad", "init_params", "layers", "load_checkpoint", "no_grad", "presets",
    "save_checkpoint", "sgd_step",
]
