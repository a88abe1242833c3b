"""Distributed ADMM for general consensus problems, in plaintext and under encryption."""

__version__ = "0.1.0"
