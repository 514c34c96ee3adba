"""Encoder-decoder semantic segmentation with multi-kernel non-bottleneck decoder blocks."""

__version__ = "0.1.0"
