"""Memorization-capacity measurement and empirical capacity modelling for small transformers."""

__version__ = "0.1.0"
