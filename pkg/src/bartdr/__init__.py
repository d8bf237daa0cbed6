"""Doubly robust and BART-augmented estimators of a population mean with missing outcomes."""

__version__ = "0.1.0"
