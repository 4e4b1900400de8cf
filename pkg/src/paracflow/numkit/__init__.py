"""Dense numerics: tape autodiff, small MLPs, Adam, finite differences."""
from .adam import AdamState, adam_step
from .autodiff import GradTape, Var
from .errors import NumericError, ShapeError, StateError
from .fd import fd_jacobian, fd_jacobian_batch
from .mlp import MlpNet, glorot_uniform, mlp_forward, mlp_grad
from .train import TrainConfig, minibatch_train

__all__ = [
    "AdamState",
    "GradTape",
    "MlpNet",
    "NumericError",
    "ShapeError",
    "StateError",
    "TrainConfig",
    "Var",
    "adam_step",
    "fd_jacobian",
    "fd_jacobian_batch",
    "glorot_uniform",
    "mlp_forward",
    "mlp_grad",
    "minibatch_train",
]
