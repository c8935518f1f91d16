"""Temporal human mesh recovery from silhouettes and 2D keypoints."""

__version__ = "0.1.0"
