"""Monocular visual odometry with a drift-reducing feedforward network."""

__version__ = "0.1.0"
