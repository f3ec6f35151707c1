"""Anchor-aligned test-time adaptation for image segmentation."""

__version__ = "0.1.0"
