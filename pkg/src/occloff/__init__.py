"""Desk-scale multi-modal 3D occupancy prediction with entropy-masked sparse fusion."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
