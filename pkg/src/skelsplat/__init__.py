"""Articulated-object reconstruction with Gaussian splats and discovered skeletons."""

__version__ = "0.1.0"
