"""Proxy-based metric embedding toolkit for fine-grained, continually growing class sets."""

__version__ = "0.1.0"
