"""Blur-driven adversarial attacks on small in-repo classifiers."""

__version__ = "0.1.0"
