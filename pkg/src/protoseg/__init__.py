"""Classifier-free prototype segmentation with incremental learning."""

__version__ = "0.1.0"
