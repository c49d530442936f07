"""Hybrid bidirectional-Mamba / transformer model for 4-D volumetric time series."""

__version__ = "0.1.0"
