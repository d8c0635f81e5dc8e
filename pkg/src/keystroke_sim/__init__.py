"""Keystroke timing side channels and fake-keystroke injection, simulated deterministically."""

__version__ = "0.1.0"
