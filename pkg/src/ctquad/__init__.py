"""Corrected trapezoidal quadrature for point singularities, with a 3D
implicit-boundary-integral application (Laplace layer potentials)."""

__version__ = "0.1.0"
