"""Depth-encoding PSF design, polarization camera simulation and depth fusion."""

__version__ = "0.1.0"
