"""Kernel backend selection.

The compiled extension is preferred when present; set ``JOURNEYKIT_PURE=1``
to force the pure-Python kernels. ``set_backend`` exists for benchmarks and
tests that compare the two implementations.
"""

import os


class _Dispatch:
    """Thin forwarding proxy so the active backend can be swapped at runtime."""

    def __init__(self, module):
        self._module = module

    def __getattr__(self, name):
        return getattr(self._module, name)


def _load_initial():
    from . import kernels_py
    if os.environ.get("JOURNEYKIT_PURE"):
        return kernels_py
    try:
        from . import _kernels
        return _kernels
    except ImportError:
        return kernels_py


kern = _Dispatch(_load_initial())


def active_backend() -> str:
    """Name of the active kernel backend: "pure" or "compiled"."""
    return kern.NAME


def set_backend(name: str) -> None:
    if name == "pure":
        from . import kernels_py as mod
    elif name == "compiled":
        from . import _kernels as mod  # ImportError if not built
    else:
        raise ValueError(f"unknown backend {name!r} (use 'pure' or 'compiled')")
    kern._module = mod


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
        return True
    except ImportError:
        return False
