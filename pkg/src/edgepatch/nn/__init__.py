from . import tensor
from .gradcheck import finite_difference_grads, relative_grad_error
from .layers import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    MultiheadSelfAttention,
    TransformerBlock,
)
from .optim import SGD, Adam
from .tensor import Tensor

__all__ = [
    "tensor",
    "Tensor",
    "Module",
    "Linear",
    "Conv2d",
    "LayerNorm",
    "MultiheadSelfAttention",
    "TransformerBlock",
    "SGD",
    "Adam",
    "finite_difference_grads",
    "relative_grad_error",
]
