"""Explainable payment-fraud detection on heterogeneous transaction graphs."""

__version__ = "0.1.0"
