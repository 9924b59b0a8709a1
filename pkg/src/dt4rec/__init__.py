"""Retention-oriented sequential recommendation with a return-conditioned transformer."""

__version__ = "0.1.0"
