"""Latent flow-matching speech enhancement with mixture-of-LoRA adaptation."""

__version__ = "0.1.0"
