"""Constraint energy minimizing multiscale solvers for multi-continuum Richards equations."""
__version__ = "0.1.0"
