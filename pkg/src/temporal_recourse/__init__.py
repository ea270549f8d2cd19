"""Temporal causal algorithmic recourse."""

__version__ = "0.1.0"
