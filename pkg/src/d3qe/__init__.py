"""Codebook-discrepancy detection of autoregressively generated images."""

__version__ = "0.1.0"
