"""Variational recurrent anomaly detection on graph time series."""

__version__ = "0.1.0"
