"""Sparse LSTM compression, encoding and accelerator simulation."""

__version__ = "0.1.0"
