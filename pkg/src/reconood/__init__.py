"""Reconstruction-based out-of-distribution detection for grayscale CT-style images."""

__version__ = "0.1.0"
WEIGHT_FORMAT_VERSION = 1
