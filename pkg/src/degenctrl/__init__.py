"""Finite-difference toolkit for 1D parabolic equations degenerating at an
interior point: coefficient hypothesis checks, weighted discrete operators,
Carleman/Hardy inequality evaluation, observability and HUM null control."""

__version__ = "0.1.0"
