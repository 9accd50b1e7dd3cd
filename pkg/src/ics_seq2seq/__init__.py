"""Sequence-to-sequence anomaly detection for multi-tag industrial control data."""

__version__ = "0.1.0"
