"""Tempomesh generates animated triangle meshes that keep one topology across frames.
A temporal latent diffusion model produces per-frame shapes, and a deformation autoencoder moves one reference mesh through them."""

__version__ = "0.1.0"

from tempomesh.cli import app

__all__ = ["app"]
