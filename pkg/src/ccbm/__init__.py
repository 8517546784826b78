"""Coupled complex boundary method for contact-region identification."""

__version__ = "0.1.0"
