"""Blendshape-driven expression mapping for rigged Gaussian head avatars."""

__version__ = "0.1.0"
