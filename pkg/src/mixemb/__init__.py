"""Enrollment-free target speech extraction from mixture-derived speaker embeddings."""

__version__ = "0.1.0"
