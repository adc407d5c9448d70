"""Minimal numpy tensor engine with reverse-mode autodiff."""

from .graph import Graph, build_graph
from .tensor import Tensor, no_grad, parameter

__all__ = ["Graph", "Tensor", "build_graph", "no_grad", "parameter"]
