"""Onboard cloud segmentation for hyperspectral imagery."""

__version__ = "0.1.0"
