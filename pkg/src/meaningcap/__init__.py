"""Meaning-guided video captioning: object-aware encoder, attention decoder,
soft-embedding generation and a Manhattan metric-learning head."""

__version__ = "0.1.0"
