"""Annotation-free object-centric video prediction on a synthetic
falling-blocks world."""

__version__ = "0.1.0"
