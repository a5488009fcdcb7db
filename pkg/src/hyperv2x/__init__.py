"""Bayesian-hypernetwork uncertainty for cooperative BEV segmentation on a synthetic V2X world."""

__version__ = "0.1.0"
