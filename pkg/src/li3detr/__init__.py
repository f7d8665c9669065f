"""Desk-scale LiDAR 3D detection transformer toolkit."""

__version__ = "0.1.0"
