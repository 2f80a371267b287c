"""Chemostat models with mortality, their stabilizing feedback, and the tools
to certify, simulate and map them."""

__version__ = "0.1.0"
