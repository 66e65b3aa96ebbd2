"""Positivity-preserving, asymptotic-preserving solvers for Keller-Segel chemotaxis."""

__version__ = "0.1.0"
