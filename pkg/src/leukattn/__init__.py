"""Attention-augmented CNN pipeline for leukemic-cell (ALL vs HEM) microscopy images."""

__version__ = "0.1.0"
