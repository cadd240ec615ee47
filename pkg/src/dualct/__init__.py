"""Dual-energy CT reconstruction with a parametric level-set object model."""

__version__ = "0.1.0"
