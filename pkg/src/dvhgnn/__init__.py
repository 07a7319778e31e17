"""Dilated vision hypergraph neural network on a small numpy autodiff core."""

from .tensor import NonFiniteError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["NonFiniteError", "Tensor", "no_grad", "__version__"]
