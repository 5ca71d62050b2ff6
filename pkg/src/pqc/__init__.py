"""Probabilistic quantum clustering."""

__version__ = "0.1.0"
