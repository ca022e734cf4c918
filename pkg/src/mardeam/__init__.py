"""Dual-energy CT simulation and metal-artifact-reduced DEAM reconstruction."""

__version__ = "0.1.0"
