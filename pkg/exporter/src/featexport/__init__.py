"""Frozen-backbone feature exporter for early-exit branch training."""

__version__ = "0.1.0"
