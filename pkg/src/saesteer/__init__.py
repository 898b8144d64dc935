"""Sparse-autoencoder interpretability toolkit for a small autoregressive sequence model."""

__version__ = "0.1.0"
