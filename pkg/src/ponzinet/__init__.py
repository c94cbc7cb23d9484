"""Ponzi-scheme contract detection on Ethereum sub-transaction networks."""

__version__ = "0.1.0"
