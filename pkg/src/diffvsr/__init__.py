"""Desk-scale latent-diffusion super-resolution for compressed video."""

__version__ = "0.1.0"
