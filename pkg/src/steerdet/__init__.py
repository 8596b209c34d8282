"""Steerable pattern detectors learned from a single template."""

__version__ = "0.1.0"
