"""Galton-Watson real forests grown consistently towards Levy forests."""

__version__ = "0.1.0"
