"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; set ``MVLAB_BACKEND=python``
to force the numpy fallback. Both expose the same functions.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _fallback

try:  # pragma: no cover - depends on build
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover
    _compiled = None


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` ('compiled', 'python' or None for default)."""
    if name is None:
        name = os.environ.get("MVLAB_BACKEND", "compiled" if _compiled is not None else "python")
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


backend = get_backend()
BACKEND_NAME = "compiled" if backend is _compiled and _compiled is not None else "python"
HAVE_COMPILED = _compiled is not None

STREAM_BROWNIAN = 0
STREAM_INITIAL = 1


def normals(seed: int, step: int, start: int, count: int, width: int, stream: int = STREAM_BROWNIAN) -> np.ndarray:
    """Standard normals keyed by (seed, stream, step, particle index)."""
    return backend.normals(seed & 0xFFFFFFFFFFFFFFFF, stream, step, start, count, width)


def uniforms(seed: int, step: int, start: int, count: int, width: int, stream: int = STREAM_INITIAL) -> np.ndarray:
    return backend.uniforms(seed & 0xFFFFFFFFFFFFFFFF, stream, step, start, count, width)


def cic_deposit(points, weights, h, origin, shape) -> np.ndarray:
    return backend.cic_deposit(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        float(h),
        np.ascontiguousarray(origin, dtype=np.int64),
        np.ascontiguousarray(shape, dtype=np.int64),
    )


def kde_gauss(samples, weights, points, bandwidth):
    return backend.kde_gauss(
        np.ascontiguousarray(samples, dtype=np.float64),
        np.ascontiguousarray(weights, dtype=np.float64),
        np.ascontiguousarray(points, dtype=np.float64),
        float(bandwidth),
    )
