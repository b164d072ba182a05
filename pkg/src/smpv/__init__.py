"""Stochastic maximum-principle verifier: adjoints, variations and second-order necessary conditions."""

__version__ = "0.1.0"
