"""Numerical laboratory for homogeneous vector-field geometry and estimates."""

__version__ = "0.1.0"
