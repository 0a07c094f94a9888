"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise, or when
the environment variable ``SOMTP_PURE_PYTHON`` is set to ``1``, the pure-Python
``_fallback`` module is used.  ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _fallback


def _load() -> tuple[ModuleType, str]:
    if os.environ.get("SOMTP_PURE_PYTHON") == "1":
        return _fallback, "python"
    try:
        from . import _core
    except ImportError:
        return _fallback, "python"
    return _core, "compiled"


impl, BACKEND = _load()


def compiled() -> ModuleType | None:
    """The compiled module if it was built, regardless of the active backend."""
    try:
        from . import _core
    except ImportError:
        return None
    return _core


def softdtw_forward_batch(D, gamma):
    return impl.softdtw_forward_batch(D, float(gamma))


def softdtw_backward_batch(D, R, gamma):
    return impl.softdtw_backward_batch(D, R, float(gamma))


def backtrack_batch(R, L, T):
    return impl.backtrack_batch(R, int(L), int(T))


def segment_pool_batch(H, bounds, use_max):
    return impl.segment_pool_batch(H, bounds, bool(use_max))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    """In-place Adam update on flat contiguous float64 vectors."""
    impl.adam_update(p, g, m, v, float(lr), float(beta1), float(beta2), float(eps), float(c1), float(c2))
