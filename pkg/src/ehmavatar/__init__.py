"""Geometry and optimization engine for expressive parametric Gaussian avatars."""

__version__ = "0.1.0"
