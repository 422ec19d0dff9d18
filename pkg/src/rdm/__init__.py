"""Recurrent diffusion: diffusion extended along time with a normalizing flow."""

__version__ = "0.1.0"
