"""Optimization of confusion-matrix metrics through linear minimization oracles."""

__version__ = "0.1.0"
