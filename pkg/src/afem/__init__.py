"""Adaptive finite elements for clusters of non-self-adjoint eigenvalues."""

__version__ = "0.1.0"
