"""Variational non-Gaussian states and truncated Wigner sampling for spin-boson dynamics."""

__version__ = "0.1.0"
