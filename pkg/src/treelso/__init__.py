"""Latent space optimization with tree-ensemble surrogates over a vector-quantized autoencoder."""

__version__ = "0.1.0"
