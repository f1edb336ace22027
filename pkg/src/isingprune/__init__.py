"""Structured CNN pruning by minimizing an Ising energy with binary differential evolution."""

__version__ = "0.1.0"
