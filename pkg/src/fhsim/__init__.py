"""Federated training simulator for multi-center volumetric classification."""

__version__ = "0.1.0"
