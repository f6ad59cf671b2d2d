"""Adaptive high-resolution perception on a toy multimodal transformer."""

__version__ = "0.1.0"
