"""Conditional normalizing-flow action decoder with a diffusion baseline."""

__version__ = "0.1.0"
