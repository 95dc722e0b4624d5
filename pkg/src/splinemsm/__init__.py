"""Spline-based multi-state Markov models fitted by penalized likelihood."""

__version__ = "0.1.0"
