"""Copula-type density estimation with variational mixture models."""

__version__ = "0.1.0"
