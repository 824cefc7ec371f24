"""Dual imitation learning from observation-only expert demonstrations."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
