"""Pressure-and-text conditioned human motion generation."""

__version__ = "0.1.0"
