"""Discontinuous Galerkin schemes for 1D conservation laws with reconstruction-based a posteriori error estimators."""

__version__ = "0.1.0"
