"""Reducibility of quasi-periodically forced transport operators on truncated Fourier lattices."""

__version__ = "0.1.0"
