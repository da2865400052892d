"""Inverse design of rough-surface friction laws with generative surrogates."""
__version__ = "0.1.0"
