"""Figures from flowvi training outputs."""

__version__ = "0.1.0"
