"""Hot kernels: compiled extension when available, numpy fallback otherwise.

Set ``TEAKIT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python

try:
    if os.environ.get("TEAKIT_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

active = compiled if compiled is not None else python
BACKEND = active.BACKEND


def get(name: str | None = None):
    """Kernel module by backend name (``"cython"``/``"python"``), or the active one."""
    if name is None:
        return active
    if name == "python":
        return python
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
