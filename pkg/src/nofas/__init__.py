"""Variational inference with normalizing flows and an adaptively trained surrogate."""

__version__ = "0.1.0"
