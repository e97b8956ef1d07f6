"""Focal-loss toolkit for one-stage LiDAR 3D object detection."""

__version__ = "0.1.0"
