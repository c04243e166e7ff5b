"""Backend dispatch for the CTC lattice kernel.

The compiled extension is used when importable; set LWFS_PURE=1 to force the
numpy fallback. Both implementations share the conventions documented in
``lwfs.lattice_np``.
"""

from __future__ import annotations

import os

import numpy as np

from . import lattice_np

BACKEND = "numpy"
_impl = lattice_np

if os.environ.get("LWFS_PURE") != "1":
    try:
        from . import _lattice as _compiled

        _impl = _compiled
        BACKEND = "compiled"
    except ImportError:
        pass


def backends() -> dict:
    """Every importable backend, keyed by name."""
    out = {"numpy": lattice_np}
    try:
        from . import _lattice as _compiled

        out["compiled"] = _compiled
    except ImportError:
        pass
    return out


def forward_backward(logprobs: np.ndarray, ext: np.ndarray):
    logprobs = np.ascontiguousarray(logprobs, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int32)
    return _impl.forward_backward(logprobs, ext)
