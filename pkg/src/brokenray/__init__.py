"""Numerical laboratory for the broken-ray transform of symmetric tensor
fields on conformally flat planar domains with a convex reflecting obstacle."""

__version__ = "0.1.0"
