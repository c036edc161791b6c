"""Identification of stable implicit nonlinear state-space models."""

__version__ = "0.1.0"
