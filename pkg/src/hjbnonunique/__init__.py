"""Numerical lab for two distinct lsc solutions of one HJB problem."""

__version__ = "0.1.0"
