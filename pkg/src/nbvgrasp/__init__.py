"""Calibrated energy-based SE(3) grasp generation with grasp-entropy view planning."""

__version__ = "0.1.0"
