"""Cuboid room layout estimation by multi-view featuremetric alignment."""

__version__ = "0.1.0"
