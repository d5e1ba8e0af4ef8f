"""Entropy solutions of the p-Laplace equation on discretized compact manifolds."""

__version__ = "0.1.0"
