"""Acoustic mosquito detection and species classification toolkit."""

__version__ = "0.1.0"
