"""Beam-search decoding with forward shallow fusion and iterative backward-LM fusion."""

__version__ = "0.1.0"
