"""Membership inference auditing with last-layer Laplace posteriors and standard baselines."""

__version__ = "0.1.0"
