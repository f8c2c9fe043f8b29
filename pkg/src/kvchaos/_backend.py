"""Import-time selection of the hot-kernel lane.

The compiled extension `kvchaos._kernels` is preferred when it imported
successfully; otherwise (or when KVCHAOS_FORCE_PY is set) the numpy lane
`kvchaos._kernels_py` is used.  Both lanes implement identical
arithmetic; `backend_name()` reports which one is live.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_COMPILED = None
if not os.environ.get("KVCHAOS_FORCE_PY"):
    try:
        from . import _kernels as _COMPILED  # type: ignore[no-redef]
    except ImportError:
        _COMPILED = None


def backend_name() -> str:
    return "cython" if _COMPILED is not None else "python"


def extent_tables(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-mask block extents around each boundary.

    lo[mask, j] / hi[mask, j] are the first/last 0-based particle of the
    blocks left/right of boundary j (between particles j and j+1); bit i
    of mask set means a boundary between particles i and i+1.
    """
    size = 1 << max(n - 1, 0)
    lo = np.zeros((size, max(n - 1, 1)), dtype=np.int64)
    hi = np.zeros((size, max(n - 1, 1)), dtype=np.int64)
    for mask in range(size):
        for j in range(n - 1):
            i = j
            while i > 0 and not (mask >> (i - 1)) & 1:
                i -= 1
            lo[mask, j] = i
            i = j + 1
            while i < n - 1 and not (mask >> i) & 1:
                i += 1
            hi[mask, j] = i
    return lo, hi


def simplex_sum(tensor: np.ndarray, incs) -> np.ndarray:
    """Strict-simplex weighted sum; see _kernels_py.simplex_sum."""
    tensor = np.ascontiguousarray(tensor, dtype=float)
    incs = [np.ascontiguousarray(a, dtype=float) for a in incs]
    k = tensor.ndim
    if _COMPILED is not None and k in (2, 3):
        out = np.empty(incs[0].shape[0])
        if k == 2:
            _COMPILED.simplex_sum2(tensor, incs[0], incs[1], out)
        else:
            _COMPILED.simplex_sum3(tensor, incs[0], incs[1], incs[2], out)
        return out
    return _kernels_py.simplex_sum(tensor, incs)


def lambda_flow_steps(x0, mask0, weights, incs, logu, dt, bridge,
                      store_paths=False):
    """Run the batched lambda-rule stepping kernel.

    Returns (x, mask, ev_count, ev_boundary, ev_time, traj); traj is None
    unless store_paths.  Inputs are not modified.
    """
    incs = np.ascontiguousarray(incs, dtype=float)
    R, steps, n = incs.shape
    x = np.array(x0, dtype=float, copy=True).reshape(R, n)
    x = np.ascontiguousarray(x)
    mask = np.array(mask0, dtype=np.int64, copy=True).reshape(R)
    weights = np.ascontiguousarray(weights, dtype=float)
    lo_tab, hi_tab = extent_tables(n)
    if bridge:
        if logu is None:
            raise ValueError("bridge correction requires log-uniform draws")
        logu = np.ascontiguousarray(logu, dtype=float)
        if logu.shape != (R, steps, n - 1):
            raise ValueError(f"logu shape {logu.shape} != {(R, steps, n - 1)}")
    else:
        logu = np.zeros((1, 1, 1))
    width = max(n - 1, 1)
    ev_boundary = np.zeros((R, width), dtype=np.int64)
    ev_time = np.zeros((R, width), dtype=float)
    ev_count = np.zeros(R, dtype=np.int64)
    traj = None
    if store_paths:
        traj = np.empty((R, steps + 1, n))
        traj[:, 0, :] = x

    if _COMPILED is not None:
        _COMPILED.lambda_flow_steps(x, mask, weights, lo_tab, hi_tab, incs,
                                    logu, float(dt), int(bool(bridge)),
                                    ev_boundary, ev_time, ev_count, traj)
    else:
        _kernels_py.lambda_flow_steps(x, mask, weights, lo_tab, hi_tab, incs,
                                      None if not bridge else logu, float(dt),
                                      bool(bridge), ev_boundary, ev_time,
                                      ev_count, traj)
    return x, mask, ev_count, ev_boundary, ev_time, traj
