"""Spatially-varying motion blur over piecewise-planar scenes, and its inversion."""

__version__ = "0.1.0"
