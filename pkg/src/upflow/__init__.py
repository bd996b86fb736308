"""Reconstruction of drift, growth and noise for branching diffusions
observed through cross-sectional population snapshots."""

__version__ = "0.1.0"
