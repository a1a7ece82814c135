"""Hierarchical tests for subgroup performance decay across two data domains."""
__version__ = "0.1.0"
