"""Repeat-purchase audience creation with a quantized multivariate point process."""

__version__ = "0.1.0"
