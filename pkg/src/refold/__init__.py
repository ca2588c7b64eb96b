"""Retrieval-augmented refinement of fixed-backbone sequence design."""

__version__ = "0.1.0"
