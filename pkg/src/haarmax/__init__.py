"""Dyadic Haar shifts, maximal truncations and sharp weighted estimates."""

__version__ = "0.1.0"
