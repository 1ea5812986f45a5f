"""Continuous-token personalized retrieval with train-only decodability regularizers."""

__version__ = "0.1.0"
