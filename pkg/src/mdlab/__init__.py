"""Desk-scale masked diffusion language model lab."""

__version__ = "0.1.0"
