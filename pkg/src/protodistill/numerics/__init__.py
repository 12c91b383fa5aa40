from . import tensor as ops
from .nn import MLP, Linear
from .optim import AdamW, AdamWState, NonFiniteGradient, adamw_step, cosine_lr
from .rng import derive_seed, stream
from .tensor import ShapeError, Tensor, backward, grad

__all__ = [
    "AdamW",
    "AdamWState",
    "Linear",
    "MLP",
    "NonFiniteGradient",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "backward",
    "cosine_lr",
    "derive_seed",
    "grad",
    "ops",
    "stream",
]
