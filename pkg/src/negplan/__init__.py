"""Counterfactual safety pairing and negative-aware planning on synthetic driving scenes."""

__version__ = "0.1.0"
