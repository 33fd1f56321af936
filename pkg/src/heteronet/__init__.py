"""Realize directed graphs as robust heteroclinic networks and check the result."""

__version__ = "0.1.0"
