"""Residual mixture of GRU experts for next-window event prediction."""

__version__ = "0.1.0"
