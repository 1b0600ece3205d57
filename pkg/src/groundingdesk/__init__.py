"""Desk-scale open-vocabulary grounding detector with its training losses and benchmark metrics."""

__version__ = "0.1.0"
