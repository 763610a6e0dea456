"""Desk-scale multispectral semantic segmentation lab."""

__version__ = "0.1.0"
