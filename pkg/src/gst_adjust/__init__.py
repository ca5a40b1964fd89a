"""Covariate-adjusted estimation and group sequential trial simulation."""

__version__ = "0.1.0"
