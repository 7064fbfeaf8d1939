"""Behavior cloning with residual vector-quantized action tokens."""

__version__ = "0.1.0"
