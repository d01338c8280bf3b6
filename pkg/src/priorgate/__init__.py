"""Anatomy-prior gated CT triage on synthetic measurement-defined phantoms."""

__version__ = "0.1.0"
