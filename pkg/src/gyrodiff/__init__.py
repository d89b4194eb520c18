"""Riemannian latent graph diffusion with gyrokernel features."""

__version__ = "0.1.0"
