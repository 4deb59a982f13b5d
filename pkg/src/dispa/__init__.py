"""Differential substructure-pathway attention for drug response regression."""

__version__ = "0.1.0"
