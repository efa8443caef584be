"""Minimal dense-tensor autodiff core: ops, Adam, checkpoints, grad checks."""

from .tensor import Tensor, GraphCycleError, constant, parameter
from . import ops
from .ops import ShapeMismatchError
from .optim import Adam
from .checkpoint import load_checkpoint, save_checkpoint, sha256_file
from . import gradcheck

__all__ = [
    "Tensor",
    "GraphCycleError",
    "ShapeMismatchError",
    "constant",
    "parameter",
    "ops",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "sha256_file",
    "gradcheck",
]
