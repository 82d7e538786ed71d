"""Hierarchical-Dirichlet-process hidden Markov models for count time series."""

__version__ = "0.1.0"
