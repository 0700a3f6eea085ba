"""Federated sharing of embedding data through differentially private conditional generative models."""

__version__ = "0.1.0"
