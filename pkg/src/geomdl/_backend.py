"""Kernel backend selection.

The compiled Cython module is preferred; the numpy fallback is used when it
is missing or when ``GEOMDL_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""
import os

from geomdl import _kernels_py

_force_python = os.environ.get("GEOMDL_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    kernels = _kernels_py
    BACKEND = "python"
else:
    try:
        from geomdl import _kernels as kernels
    except ImportError:
        kernels = _kernels_py
        BACKEND = "python"
    else:
        BACKEND = "cython"

__all__ = ["BACKEND", "kernels"]
