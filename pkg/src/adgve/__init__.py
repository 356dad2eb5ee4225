"""Driving-aware quality scoring for generated driving videos."""

__version__ = "0.1.0"
