"""Numerical laboratory for lattice Bose gases in the mean-field regime."""

__version__ = "0.1.0"
