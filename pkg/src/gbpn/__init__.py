"""Belief-propagation node classification with a learned MLP and coupling matrix."""

__version__ = "0.1.0"
