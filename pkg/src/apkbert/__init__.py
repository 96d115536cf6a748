"""Manifest-only Android malware classification with a from-scratch encoder."""

__version__ = "0.1.0"
