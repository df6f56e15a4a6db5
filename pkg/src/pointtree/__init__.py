"""Transformation-robust point cloud pipeline built on PCA-split K-D trees."""

__version__ = "0.1.0"
