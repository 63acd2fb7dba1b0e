"""Bayesian filtering with Ulam discretizations of the transfer operator."""

__version__ = "0.1.0"
