"""Angle-optimised text embeddings at toy scale."""

__version__ = "0.1.0"
