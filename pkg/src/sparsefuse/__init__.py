"""Sparse camera/LiDAR fusion detector on synthetic scenes, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
