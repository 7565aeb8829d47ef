"""Learnable depth pruning for residual networks, on a self-contained autograd core."""

__version__ = "0.1.0"
