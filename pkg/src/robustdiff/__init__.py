"""Robust conditional diffusion on 2-D toy data under noisy labels."""

__version__ = "0.1.0"
