"""Spiking sampling networks of LIF neurons under neuromorphic substrate constraints."""

__version__ = "0.1.0"
