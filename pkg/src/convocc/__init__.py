"""Convolutional occupancy fields: encoders, U-Nets, occupancy heads, mesh extraction."""

__version__ = "0.1.0"
