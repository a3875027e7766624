"""Gradient-guided few-shot training toolkit."""

__version__ = "0.1.0"
