"""Unsupervised cross-modality domain adaptation for VS and cochlea segmentation."""

__version__ = "0.1.0"
