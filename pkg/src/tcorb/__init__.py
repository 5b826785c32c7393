"""Objective structure features of tropical-cyclone infrared imagery and
sparse rapid-change classifiers built on them."""

__version__ = "0.1.0"
