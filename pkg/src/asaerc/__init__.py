"""Adaptive-sensing attention readouts for a diffusion-field reservoir."""

__version__ = "0.1.0"
