"""Desk-scale vision-language pre-training lab."""

__version__ = "0.1.0"
