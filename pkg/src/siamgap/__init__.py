"""Siamese-GAP network with a confidence-partitioned hybrid loss."""

__version__ = "0.1.0"
