from . import ops
from .checkpoint import CheckpointFormatError, read_container, write_container
from .gradcheck import finite_diff_grad, relative_error
from .model import ConvSpec, ReconModel, ShapeError, model_apply, param_leaf
from .tape import Tape, Var, backward, value_of

__all__ = [
    "ops",
    "Tape",
    "Var",
    "backward",
    "value_of",
    "finite_diff_grad",
    "relative_error",
    "ConvSpec",
    "ReconModel",
    "ShapeError",
    "model_apply",
    "param_leaf",
    "CheckpointFormatError",
    "read_container",
    "write_container",
]
