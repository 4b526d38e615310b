"""Generative retrieval over large candidate sets: decomposed item mapping,
multi-query max scoring, NCE training and neighbor-expanded sampling."""

__version__ = "0.1.0"
