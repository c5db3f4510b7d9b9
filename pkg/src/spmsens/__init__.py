"""Measure-valued structured population models and their parameter sensitivity."""

__version__ = "0.1.0"
