"""Federated BEHRT-style next-visit prediction on longitudinal diagnosis data."""

__version__ = "0.1.0"
