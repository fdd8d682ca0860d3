"""Backend selection for the sweep recurrence kernel.

The compiled ``_sweep_ext`` module is used when it imports; otherwise the
numpy implementation in ``_sweep_py`` takes over.  ``SDNET_BACKEND`` forces
a choice (``native`` or ``python``); ``auto`` is the default.
"""
from __future__ import annotations

import logging
import os
from types import ModuleType

from . import _sweep_py
from .errors import ConfigError

logger = logging.getLogger(__name__)

try:
    from . import _sweep_ext  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on build
    _sweep_ext = None

_BACKENDS: dict[str, ModuleType | None] = {"native": _sweep_ext, "python": _sweep_py}


def available() -> list[str]:
    return [name for name, mod in _BACKENDS.items() if mod is not None]


def _initial() -> str:
    wanted = os.environ.get("SDNET_BACKEND", "auto").lower()
    if wanted == "auto":
        return "native" if _sweep_ext is not None else "python"
    if wanted not in _BACKENDS:
        raise ConfigError(f"SDNET_BACKEND must be auto, native or python, got {wanted!r}")
    if _BACKENDS[wanted] is None:
        logger.warning("native sweep kernel not built; falling back to python")
        return "python"
    return wanted


_current = _initial()


def backend() -> str:
    return _current


def set_backend(name: str) -> None:
    global _current
    if name not in _BACKENDS or _BACKENDS[name] is None:
        raise ConfigError(f"backend {name!r} unavailable; have {available()}")
    _current = name


def sweep_kernel() -> ModuleType:
    return _BACKENDS[_current]
