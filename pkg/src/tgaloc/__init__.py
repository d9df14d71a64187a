"""Weakly supervised text-to-moment retrieval with text-guided attention."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
