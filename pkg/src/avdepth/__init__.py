"""Material-aware audio-visual depth estimation on a small numpy autograd."""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
