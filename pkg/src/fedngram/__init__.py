"""Federated n-gram language models distilled from a recurrent teacher."""

__version__ = "0.1.0"
