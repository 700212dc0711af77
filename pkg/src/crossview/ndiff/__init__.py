"""Small reverse-mode differentiation engine on top of numpy."""
from . import ops
from .memory import retain_freed_memory
from .gradcheck import GradCheckReport, grad_check, rel_error
from .optim import OptimizerState, global_norm, lr_schedule, sgd_momentum_step
from .serialize import CorruptPayloadError, read_payload, write_payload
from .tensor import NonFiniteError, Parameter, ShapeError, Tape, Tensor, active_tape, backward, paused

__all__ = [
    "ops", "Tensor", "Parameter", "Tape", "backward", "active_tape", "paused",
    "ShapeError", "NonFiniteError", "grad_check", "GradCheckReport", "rel_error",
    "OptimizerState", "sgd_momentum_step", "lr_schedule", "global_norm",
    "read_payload", "write_payload", "CorruptPayloadError", "retain_freed_memory",
]
