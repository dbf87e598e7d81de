"""Linearized monotonicity detection of inclusions in elastic plates."""

__version__ = '0.1.0'
