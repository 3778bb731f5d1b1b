"""Desk-scale lab for transferable adversarial attacks on small image classifiers."""

__version__ = "0.1.0"
