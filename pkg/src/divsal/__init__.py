"""Divergence modeling for salient object detection with multiple annotators."""

__version__ = "0.1.0"
