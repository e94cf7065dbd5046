"""Fenchel-Young losses, log-partition approximations and a matrix-factorization
testbed for comparing them."""

__version__ = "0.1.0"
