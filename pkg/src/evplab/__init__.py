"""Numerical laboratory for the environment-viewed-by-the-particle process on the torus."""

__version__ = "0.1.0"
