"""Nested sampling over hyperparameters with collapsed latent variables."""

__version__ = "0.1.0"
