"""Adversarial objects against image-based driving policies in voxel radiance fields."""

__version__ = "0.1.0"
