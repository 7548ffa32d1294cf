"""Simulated cavity duplexer, supervised tuning actor and solver."""

__version__ = "0.1.0"
