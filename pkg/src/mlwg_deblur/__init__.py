"""Bayesian TV deblurring with local and parallel MALA-within-Gibbs sampling."""

__version__ = "0.1.0"
