"""Pure-numpy implementations of the hot kernels.

These mirror the compiled Cython lane in `_kernels.pyx` operation for
operation: the per-element arithmetic (accumulation order, comparisons,
merge reconciliation) is identical, so the two lanes produce equal
results on the same inputs.  Vectorization here is across replicas; the
compiled lane uses plain loops.
"""

from __future__ import annotations

import numpy as np


def simplex_sum(tensor: np.ndarray, incs, chunk: int = 2048) -> np.ndarray:
    """Strict-simplex weighted sum over coarse cells.

    tensor: (G,)*k kernel values at cell left endpoints; incs: k arrays of
    shape (R, G), one per time axis.  Returns (R,) with
    sum_{a_1<...<a_k} tensor[a_1..a_k] * prod_j incs[j][r, a_j].
    """
    k = tensor.ndim
    G = tensor.shape[0]
    if any(a.shape[1] != G for a in incs) or len(incs) != k:
        raise ValueError("increment arrays do not match the kernel tensor")
    reps = incs[0].shape[0]
    if k == 1:
        return incs[0] @ tensor
    upper = np.triu(np.ones((G, G)), k=1)
    masked = tensor * upper.reshape((G, G) + (1,) * (k - 2))
    out = np.empty(reps)
    for lo in range(0, reps, chunk):
        hi = min(lo + chunk, reps)
        cur = np.einsum("ra,a...->r...", incs[0][lo:hi], masked)
        for j in range(1, k):
            if j < k - 1:
                cur *= upper.reshape((1, G, G) + (1,) * (k - 2 - j))
            cur = np.einsum("ra,ra...->r...", incs[j][lo:hi], cur)
        out[lo:hi] = cur
    return out


def _merge_rows(x, mask, rows, j, lo_tab, hi_tab, d0, d1, s, dt,
                ev_boundary, ev_time, ev_count):
    """Merge the blocks adjacent to boundary j for the given rows."""
    lo = lo_tab[mask[rows], j]
    hi = hi_tab[mask[rows], j]
    mid = 0.5 * (x[rows, j] + x[rows, j + 1])
    for i in range(x.shape[1]):
        sel = (lo <= i) & (i <= hi)
        if sel.any():
            x[rows[sel], i] = mid[sel]
    denom = d0 - d1
    safe = np.where(denom > 0.0, denom, 1.0)
    theta = np.where(d1 <= 0.0,
                     np.where(denom > 0.0, d0 / safe, 0.5),
                     0.5)
    idx = ev_count[rows]
    ev_boundary[rows, idx] = j
    ev_time[rows, idx] = (s + theta) * dt
    ev_count[rows] += 1
    mask[rows] &= ~(1 << j)


def lambda_flow_steps(x, mask, weights, lo_tab, hi_tab, incs, logu, dt,
                      bridge, ev_boundary, ev_time, ev_count, traj):
    """Advance replica-batched lambda-rule particle systems in place.

    x: (R, n) current positions; mask: (R,) boundary bitmasks; weights:
    (2^(n-1), n, n) per-mask driver weights; incs: (R, steps, n) Wiener
    increments; logu: (R, steps, n-1) log-uniforms for the bridge test.
    Events are appended to ev_* at ev_count cursor positions; traj, when
    not None, receives positions after each step (slot 0 pre-filled).
    """
    R, steps, n = incs.shape
    for s in range(steps):
        gap0 = x[:, 1:] - x[:, :-1]
        w_sel = weights[mask]
        dW = incs[:, s, :]
        inc = np.zeros((R, n))
        for q in range(n):
            inc += w_sel[:, :, q] * dW[:, q, None]
        x += inc
        for j in range(n - 1):
            active = (mask >> j) & 1 == 1
            if not active.any():
                continue
            d1 = x[:, j + 1] - x[:, j]
            hit = active & (d1 <= 0.0)
            if bridge:
                hit |= active & (d1 > 0.0) & (logu[:, s, j] * dt < -(gap0[:, j] * d1))
            if hit.any():
                rows = np.nonzero(hit)[0]
                _merge_rows(x, mask, rows, j, lo_tab, hi_tab,
                            gap0[rows, j], d1[rows], s, dt,
                            ev_boundary, ev_time, ev_count)
        # leftward overlaps created by merge reconciliation
        while True:
            merged_any = False
            for j in range(n - 1):
                active = (mask >> j) & 1 == 1
                d1 = x[:, j + 1] - x[:, j]
                bad = active & (d1 <= 0.0)
                if bad.any():
                    rows = np.nonzero(bad)[0]
                    _merge_rows(x, mask, rows, j, lo_tab, hi_tab,
                                gap0[rows, j], d1[rows], s, dt,
                                ev_boundary, ev_time, ev_count)
                    merged_any = True
            if not merged_any:
                break
        if traj is not None:
            traj[:, s + 1, :] = x
