"""Counting objects in video through conservation-constrained density flow."""

__version__ = "0.1.0"
