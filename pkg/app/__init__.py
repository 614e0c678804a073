"""Bayesian joint models with curvature-based within-individual variability."""

__version__ = "0.1.0"
