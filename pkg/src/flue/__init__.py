"""Simulator for federated learning with coded proxy weights and masking surpluses."""

__version__ = "0.1.0"
