"""Selects the compiled kernels when available, else the pure-Python ones.

Set ``ADAPTCP_PURE_PYTHON=1`` to force the fallback at import time.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

_core = None
if os.environ.get("ADAPTCP_PURE_PYTHON", "").strip() not in ("1", "true", "yes"):
    try:
        from . import _core  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on the build
        _core = None

COMPILED = _core is not None
BACKENDS = ("auto", "compiled", "python")


def use_compiled(backend: str = "auto") -> bool:
    """Resolve a backend name to True (compiled) or False (pure Python)."""
    if backend not in BACKENDS:
        raise ConfigError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if backend == "compiled" and not COMPILED:
        raise ConfigError("compiled backend requested but the extension is not built")
    return COMPILED and backend != "python"


def core():
    return _core


def merge_sorted_uniforms_py(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs)
    out = np.searchsorted(cum, u, side="right")
    # rounding can leave u beyond the last cumulative value
    nz = np.flatnonzero(probs > 0)
    last = int(nz[-1]) if nz.size else len(probs) - 1
    return np.minimum(out, last).astype(np.int64)


def merge_sorted_uniforms(probs, u, backend: str = "auto") -> np.ndarray:
    """Category of each sorted uniform in ``u`` under the distribution ``probs``."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if use_compiled(backend):
        return _core.merge_sorted_uniforms(probs, u)
    return merge_sorted_uniforms_py(probs, u)
