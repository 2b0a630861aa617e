"""Structural dependency learning for multi-level rearrangement planning."""

__version__ = "0.1.0"
