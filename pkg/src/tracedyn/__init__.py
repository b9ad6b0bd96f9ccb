"""Numerical laboratory for trace dynamics of matrix models."""

__version__ = "0.1.0"
