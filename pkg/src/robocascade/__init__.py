"""Calibration-free robot perception: mask segmentation cascaded into 3D joint regression."""

__version__ = "0.1.0"
