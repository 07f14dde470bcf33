"""Kernel backend selection.

The compiled Cython extension is used when importable; otherwise the numpy
fallback takes over. ``STOPCASCADE_BACKEND`` forces a choice: ``python``,
``cython``, or ``auto`` (default).
"""

import os

from . import _numpy as python_backend

_requested = os.environ.get("STOPCASCADE_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "cython"):
    raise ImportError(f"unknown STOPCASCADE_BACKEND value: {_requested!r}")

compiled_backend = None
if _requested != "python":
    try:
        from . import _core as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "STOPCASCADE_BACKEND=cython but the compiled extension is "
                "not built; reinstall the package or use the python backend"
            )
        compiled_backend = None

if compiled_backend is not None:
    _active = compiled_backend
    BACKEND_NAME = "cython"
else:
    _active = python_backend
    BACKEND_NAME = "python"

affine = _active.affine
affine_backward = _active.affine_backward
sgd_update = _active.sgd_update
