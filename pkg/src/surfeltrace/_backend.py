"""Pick the compiled kernels when importable, else the pure-Python ones.

``SURFELTRACE_BACKEND=python`` forces the fallback; ``SURFELTRACE_THREADS``
sets the worker count used by the compiled kernels.
"""

from __future__ import annotations

import os


def _load(name: str):
    if name == "python":
        from . import _pycore as mod

        return mod, "python"
    try:
        from . import _core as mod
    except ImportError:
        if name == "compiled":
            raise
        from . import _pycore as mod

        return mod, "python"
    return mod, "compiled"


kernels, BACKEND = _load(os.environ.get("SURFELTRACE_BACKEND", "auto").lower())


def get(name: str | None = None):
    """Kernel module for ``name`` ("compiled", "python") or the active one."""
    if name is None:
        return kernels
    return _load(name)[0]


def default_threads() -> int:
    env = os.environ.get("SURFELTRACE_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)
