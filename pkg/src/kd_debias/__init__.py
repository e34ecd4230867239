"""Debiased recommendation by disentangled-preference teachers and distilled MF students."""

__version__ = "0.1.0"
