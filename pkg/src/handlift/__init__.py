"""Uncertainty-aware multi-view 3D hand keypoint lifting from noisy 2D labels."""

__version__ = "0.1.0"
