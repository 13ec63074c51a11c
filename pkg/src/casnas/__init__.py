"""Complexity-aware supernet training and search for hybrid CNN-ViT spaces."""

__version__ = "0.1.0"
