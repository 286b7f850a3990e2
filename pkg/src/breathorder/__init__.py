"""Pairwise respiratory-status ordering with factorized video transformers."""

__version__ = "0.1.0"
