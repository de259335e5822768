"""Frugal Flows: normalising-flow causal models and benchmark generation."""

__version__ = "0.1.0"
