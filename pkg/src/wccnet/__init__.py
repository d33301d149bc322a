"""Wavelet-conditioned control branch for volumetric diffusion denoising."""

__version__ = "0.1.0"
