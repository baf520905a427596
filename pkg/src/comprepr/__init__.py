"""Compositional representation learning for few-shot recognition."""

__version__ = "0.1.0"
