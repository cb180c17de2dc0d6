"""Cell-kernel backend selection.

Two interchangeable backends implement the fused cell step:

* ``compiled`` -- the Cython extension ``slan._cell_cy`` (built at install
  time when a C compiler is available);
* ``python``   -- the numpy fallback ``slan._cell_py``.

The active backend is chosen at import: the ``SLAN_KERNEL`` environment
variable may force ``python`` or ``compiled``; the default ``auto`` prefers
the compiled module and silently falls back.  ``set_backend`` switches at
runtime, which the benchmark command uses to compare both in one process.

Both backends produce the same numbers up to floating-point summation
order; they are not guaranteed bit-identical to each other, but each is
deterministic on its own.
"""

from __future__ import annotations

import os

from . import _cell_py

try:
    from . import _cell_cy
except ImportError:
    _cell_cy = None

_BACKENDS = {"python": _cell_py}
if _cell_cy is not None:
    _BACKENDS["compiled"] = _cell_cy

_active = None


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> str:
    """Select the active backend; returns the name actually selected."""
    global _active
    if name == "auto":
        name = "compiled" if "compiled" in _BACKENDS else "python"
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {', '.join(available_backends())}")
    _active = _BACKENDS[name]
    return name


def backend_name() -> str:
    return _active.BACKEND


def get_backend():
    """Return the active module exposing cell_forward / cell_backward."""
    return _active


set_backend(os.environ.get("SLAN_KERNEL", "auto"))
