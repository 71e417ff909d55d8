"""Latent-space synthesis of preference pairs for embedding reward models."""

__version__ = "0.1.0"
