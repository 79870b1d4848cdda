"""Curvature and robustness laboratory for small ReLU classifiers."""

__version__ = "0.1.0"
