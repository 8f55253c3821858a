"""Asymmetric feature fusion: multi-model gallery fusion with a compatible lightweight query encoder."""

__version__ = "0.1.0"
