"""Dual-alignment pre-training for cross-lingual sentence embedding, at toy scale."""

__version__ = "0.1.0"
