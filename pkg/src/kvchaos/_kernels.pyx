# cython: language_level=3
"""Compiled hot kernels: strict-simplex sums and lambda-rule flow stepping.

Mirrors `_kernels_py` operation for operation; see that module for the
semantics.  The numpy lane vectorizes across replicas, this lane loops,
so per-replica arithmetic (and hence the results) are identical.
"""

import numpy as np

cimport numpy as cnp


def simplex_sum2(double[:, ::1] tensor, double[:, ::1] x, double[:, ::1] y,
                 double[::1] out):
    cdef Py_ssize_t R = x.shape[0], G = x.shape[1]
    cdef Py_ssize_t r, a, b
    cdef double total, inner
    for r in range(R):
        total = 0.0
        for b in range(G):
            inner = 0.0
            for a in range(b):
                inner += x[r, a] * tensor[a, b]
            total += y[r, b] * inner
        out[r] = total


def simplex_sum3(double[:, :, ::1] tensor, double[:, ::1] x, double[:, ::1] y,
                 double[:, ::1] z, double[::1] out):
    cdef Py_ssize_t R = x.shape[0], G = x.shape[1]
    cdef Py_ssize_t r, a, b, c
    cdef double total, accb, inner
    for r in range(R):
        total = 0.0
        for c in range(G):
            accb = 0.0
            for b in range(c):
                inner = 0.0
                for a in range(b):
                    inner += x[r, a] * tensor[a, b, c]
                accb += y[r, b] * inner
            total += z[r, c] * accb
        out[r] = total


cdef inline void _merge(double[:, ::1] x, long[::1] mask, Py_ssize_t r,
                        Py_ssize_t j, long[:, ::1] lo_tab, long[:, ::1] hi_tab,
                        double d0, double d1, Py_ssize_t s, double dt,
                        long[:, ::1] ev_boundary, double[:, ::1] ev_time,
                        long[::1] ev_count) noexcept:
    cdef Py_ssize_t lo = lo_tab[mask[r], j]
    cdef Py_ssize_t hi = hi_tab[mask[r], j]
    cdef double mid = 0.5 * (x[r, j] + x[r, j + 1])
    cdef Py_ssize_t i
    for i in range(lo, hi + 1):
        x[r, i] = mid
    cdef double denom = d0 - d1
    cdef double theta
    if d1 <= 0.0:
        theta = d0 / denom if denom > 0.0 else 0.5
    else:
        theta = 0.5
    cdef long idx = ev_count[r]
    ev_boundary[r, idx] = j
    ev_time[r, idx] = (s + theta) * dt
    ev_count[r] = idx + 1
    mask[r] = mask[r] & ~(1 << j)


def lambda_flow_steps(double[:, ::1] x, long[::1] mask,
                      double[:, :, ::1] weights, long[:, ::1] lo_tab,
                      long[:, ::1] hi_tab, double[:, :, ::1] incs,
                      double[:, :, ::1] logu, double dt, int bridge,
                      long[:, ::1] ev_boundary, double[:, ::1] ev_time,
                      long[::1] ev_count, traj_obj):
    cdef Py_ssize_t R = incs.shape[0], steps = incs.shape[1], n = incs.shape[2]
    cdef double[:, :, ::1] traj
    cdef int store = traj_obj is not None
    if store:
        traj = traj_obj
    cdef double[::1] x_start = np.empty(n)
    cdef double[::1] gap0 = np.empty(max(n - 1, 1))
    cdef Py_ssize_t r, s, i, j, q
    cdef double inc, d0, d1
    cdef bint hit, merged_any
    for r in range(R):
        for s in range(steps):
            for i in range(n):
                x_start[i] = x[r, i]
            for j in range(n - 1):
                gap0[j] = x_start[j + 1] - x_start[j]
            for i in range(n):
                inc = 0.0
                for q in range(n):
                    inc += weights[mask[r], i, q] * incs[r, s, q]
                x[r, i] = x_start[i] + inc
            for j in range(n - 1):
                if not (mask[r] >> j) & 1:
                    continue
                d1 = x[r, j + 1] - x[r, j]
                d0 = gap0[j]
                hit = d1 <= 0.0
                if (not hit) and bridge:
                    hit = logu[r, s, j] * dt < -(d0 * d1)
                if hit:
                    _merge(x, mask, r, j, lo_tab, hi_tab, d0, d1, s, dt,
                           ev_boundary, ev_time, ev_count)
            merged_any = True
            while merged_any:
                merged_any = False
                for j in range(n - 1):
                    if not (mask[r] >> j) & 1:
                        continue
                    d1 = x[r, j + 1] - x[r, j]
                    if d1 <= 0.0:
                        _merge(x, mask, r, j, lo_tab, hi_tab, gap0[j], d1,
                               s, dt, ev_boundary, ev_time, ev_count)
                        merged_any = True
            if store:
                for i in range(n):
                    traj[r, s + 1, i] = x[r, i]
