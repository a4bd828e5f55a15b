"""Dual-view breast-lesion classification from scratch on numpy."""

__version__ = "0.1.0"
