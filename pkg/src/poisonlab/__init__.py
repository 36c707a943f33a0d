"""Desk-scale laboratory for latent-diffusion shilling attacks on
collaborative recommenders."""

__version__ = "0.1.0"
