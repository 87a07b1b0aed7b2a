"""Discrete-time stochastic beable dynamics with self-adjusting spin bases."""

__version__ = "0.1.0"
