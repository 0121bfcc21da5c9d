"""Functional uniform priors for nonlinear regression models."""

__version__ = "0.1.0"
