"""Dense tensors with reverse-mode differentiation, and the layers the scene model needs."""
from .autograd import Tensor, no_grad
from .params import ModelParams, load_weights, save_weights
from .optim import Adam, AdamState, adam_step

__all__ = ["Tensor", "no_grad", "ModelParams", "load_weights", "save_weights", "Adam", "AdamState", "adam_step"]
