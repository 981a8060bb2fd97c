"""Spectrally-shaped diffusion noise for GAN vocoder training, at desk scale."""

__version__ = "0.1.0"
