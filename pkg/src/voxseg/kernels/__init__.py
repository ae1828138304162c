"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist:

* ``_cykernels`` — compiled Cython loops (sequential accumulation),
* ``numpy_backend`` — vectorized numpy/BLAS fallback.

Selection happens once at import time via VOXSEG_KERNELS:

* ``auto`` (default): grid_sample uses the compiled kernels when built,
  conv3d stays on the BLAS-backed numpy path (gemm beats scalar loops for
  channel contractions; see the ``bench-kernels`` CLI for measurements on
  your machine). Without the extension everything falls back to numpy.
* ``ext``: compiled kernels for everything (ImportError if not built).
* ``numpy``: pure numpy for everything.

Both backends are deterministic for fixed inputs, so per-seed bit-exact
reproducibility holds whichever is active; a checkpoint trained under one
backend may differ in float rounding from one trained under the other.
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _cykernels
except ImportError:
    _cykernels = None

_MODE = os.environ.get("VOXSEG_KERNELS", "auto")
if _MODE not in ("auto", "ext", "numpy"):
    raise ValueError(f"VOXSEG_KERNELS must be auto|ext|numpy, got {_MODE!r}")
if _MODE == "ext" and _cykernels is None:
    raise ImportError("VOXSEG_KERNELS=ext but voxseg.kernels._cykernels is not built")

if _MODE == "numpy" or _cykernels is None:
    _conv = numpy_backend
    _sample = numpy_backend
elif _MODE == "ext":
    _conv = _cykernels
    _sample = _cykernels
else:  # auto
    _conv = numpy_backend
    _sample = _cykernels

HAVE_EXT = _cykernels is not None
ACTIVE = {"conv3d": _conv.NAME, "grid_sample": _sample.NAME}

conv3d_forward = _conv.conv3d_forward
conv3d_backward = _conv.conv3d_backward
grid_sample_forward = _sample.grid_sample_forward
grid_sample_backward = _sample.grid_sample_backward


def backends() -> dict:
    """Importable backend modules keyed by name (for tests and benchmarks)."""
    out = {"numpy": numpy_backend}
    if _cykernels is not None:
        out["ext"] = _cykernels
    return out
