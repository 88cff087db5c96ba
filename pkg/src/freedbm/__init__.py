"""Numerical experiments on bulk universality for sums of randomly rotated matrices."""

__version__ = "0.1.0"
