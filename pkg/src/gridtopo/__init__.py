"""Curriculum-trained topology control for cascading power grids."""

__version__ = "0.1.0"
