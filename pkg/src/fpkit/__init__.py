"""Fourier ptychography simulation and phase retrieval workbench."""

__version__ = "0.1.0"
