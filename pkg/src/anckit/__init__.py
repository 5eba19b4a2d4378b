"""Robust feedback active-noise-control design with per-frequency uncertainty models."""

__version__ = "0.1.0"
