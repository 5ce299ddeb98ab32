"""Surrogate-based source inversion for an idealised SO2 dispersion model."""

__version__ = "0.1.0"
