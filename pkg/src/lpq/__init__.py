"""Low-precision inference toolkit for recommendation models."""

__version__ = "0.1.0"
