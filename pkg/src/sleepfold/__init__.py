"""Whole-cycle long-sequence modelling for epoch-wise sleep staging."""

__version__ = "0.1.0"
