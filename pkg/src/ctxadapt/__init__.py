"""Contextual adapters for entity biasing in a from-scratch numpy CTC recogniser."""

__version__ = "0.1.0"
