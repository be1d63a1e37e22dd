"""Bayesian meta-analysis of diagnostic test accuracy, with or without a gold standard."""

__version__ = "0.1.0"
