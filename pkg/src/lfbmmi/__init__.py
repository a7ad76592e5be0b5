"""Lattice-free boosted MMI training for hybrid acoustic models."""

__version__ = "0.1.0"
