"""Desk-scale simulator for class-incremental learning with repetition."""

__version__ = "0.1.0"
