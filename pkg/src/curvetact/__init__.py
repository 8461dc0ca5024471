"""Curved camera-based tactile sensing: simulation, calibration, reconstruction."""

__version__ = "0.1.0"
