"""Hot-kernel dispatch.

The compiled Cython module is used when it was built; otherwise (or when
``OCCLOFF_PURE_PYTHON=1`` is set) the numpy implementations are used.
``BACKEND`` names the active one.
"""
import os

from . import _kernels_py as python_backend
from ._kernels_py import BOX, CYLINDER, PLANE, SPHERE

compiled_backend = None
if not os.environ.get("OCCLOFF_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

fps_groups = _active.fps_groups
raycast = _active.raycast

__all__ = [
    "BACKEND", "BOX", "CYLINDER", "PLANE", "SPHERE",
    "compiled_backend", "fps_groups", "python_backend", "raycast",
]
