"""resprop: residual-unit variants with numerically verified signal propagation."""

from .autograd import Tensor, Graph, backward, grad_check, reset_graph, fresh_graph, no_record

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "grad_check",
    "reset_graph",
    "fresh_graph",
    "no_record",
    "__version__",
]
