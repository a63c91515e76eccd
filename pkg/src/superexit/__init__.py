"""Simulation and verification toolkit for branching exit measures."""

__version__ = "0.1.0"
