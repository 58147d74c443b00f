"""Multimodal CNN-MLP classifiers over molecular images and descriptor tables."""

__version__ = "0.1.0"
