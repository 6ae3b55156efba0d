"""Hot-kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``FXDL_PURE_PYTHON=1`` before import to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("FXDL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm_fwd(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Normalize over the last axis. Returns (y, rstd) with rstd shaped x.shape[:-1]."""
    y, r = _impl.layer_norm_fwd(_rows(x), eps)
    return y.reshape(x.shape), r.reshape(x.shape[:-1])


def layer_norm_bwd(gy: np.ndarray, y: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    gy = gy.astype(y.dtype, copy=False)
    gx = _impl.layer_norm_bwd(_rows(gy), _rows(y), np.ascontiguousarray(rstd.reshape(-1)))
    return gx.reshape(y.shape)


def silu_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y, s = _impl.silu_fwd(_rows(x))
    return y.reshape(x.shape), s.reshape(x.shape)


def silu_bwd(gy: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    gy = gy.astype(x.dtype, copy=False)
    return _impl.silu_bwd(_rows(gy), _rows(x), _rows(s)).reshape(x.shape)


def gaussian_kernel_sums(x: np.ndarray, y: np.ndarray, bandwidth: float):
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.ascontiguousarray(y, dtype=np.float64).reshape(len(y), -1)
    return _impl.gaussian_kernel_sums(x, y, float(bandwidth))


def mean_pairwise_distance(x: np.ndarray) -> float:
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(len(x), -1)
    return float(_impl.mean_pairwise_distance(x))
