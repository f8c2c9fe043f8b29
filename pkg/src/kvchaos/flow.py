"""n-point motions of the Arratia flow from independent Wiener paths.

Two constructions are provided: the sequential gluing construction
(each new particle follows its own Wiener path until it first meets an
already-built trajectory, then adopts that trajectory) and the
lambda-rule construction (particles in one block of the current
partition share the block's lambda-weighted combination of drivers).

Coalescence between grid points is decided by the Brownian-bridge
zero-crossing probability exp(-2 d0 d1 / (rate dt)) applied to each
adjacent gap, which restores first-order weak accuracy that plain
sign-change detection loses.  Simultaneous multi-gap hits inside one
step are resolved left to right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .noise import (DEFAULT_CHUNK, WienerBundle, increment_chunks,
                    log_uniform_chunks, _resolve_steps)
from .partitions import (IntervalPartition, LambdaRule, PartitionChain,
                         validate_lambda)

__all__ = [
    "ParticleSystem",
    "ScenarioRecord",
    "FlowBatch",
    "simulate_sequential",
    "simulate_lambda",
    "simulate_lambda_batch",
    "simulate_sequential_batch",
    "detect_crossing",
    "scenario_indicator",
    "chain_key",
    "stopped_values",
    "stopped_endpoints",
]

_NS_SINGLE_UNIFORM = 5  # spawn namespace for single-replica bridge draws


def detect_crossing(d0, d1, dt: float, variance_rate: float = 2.0):
    """Brownian-bridge zero-crossing probability for one time step.

    d0 and d1 are the nonnegative gap values at the step's endpoints; the
    gap diffuses with the given variance rate.  Touching (d0 = 0 or
    d1 = 0) gives probability 1 by continuity of the formula.
    """
    d0 = np.asarray(d0, float)
    d1 = np.asarray(d1, float)
    if np.any(d0 < 0) or np.any(d1 < 0):
        raise ValueError("gap values must be nonnegative")
    if dt <= 0 or variance_rate <= 0:
        raise ValueError("dt and variance_rate must be positive")
    p = np.exp(-2.0 * d0 * d1 / (variance_rate * dt))
    return p if p.ndim else float(p)


def chain_key(chain: PartitionChain) -> tuple[int, ...]:
    """Ordered tuple of boundary bits cleared along the chain's strict
    merges; uniquely identifies a strictly decreasing chain."""
    key = []
    prev = chain.partitions[0].boundary_mask()
    for p in chain.partitions[1:]:
        cur = p.boundary_mask()
        diff = prev & ~cur
        if diff:
            key.append(diff.bit_length() - 1)
        prev = cur
    return tuple(key)


@dataclass
class ScenarioRecord:
    """Realized coalescence history of one n-point motion."""

    partitions: tuple[IntervalPartition, ...]  # (kappa, nu_1, ..., nu_k)
    times: tuple[float, ...]                   # strictly increasing tau_k
    horizon: float

    def __post_init__(self):
        if len(self.times) != len(self.partitions) - 1:
            raise ValueError("need one coalescence time per merge")
        if any(a >= b for a, b in zip(self.times, self.times[1:])):
            raise ValueError("coalescence times must increase strictly")

    @property
    def final_partition(self) -> IntervalPartition:
        return self.partitions[-1]

    @property
    def num_merges(self) -> int:
        return len(self.times)

    def key_up_to(self, t: float) -> tuple[int, ...]:
        prev = self.partitions[0].boundary_mask()
        key = []
        for p, tau in zip(self.partitions[1:], self.times):
            if tau > t:
                break
            cur = p.boundary_mask()
            key.append((prev & ~cur).bit_length() - 1)
            prev = cur
        return tuple(key)


def scenario_indicator(record: ScenarioRecord, chain: PartitionChain,
                       t: float) -> int:
    """1 iff the realized merges up to t match the strictly decreasing
    chain exactly and the next merge (if any) happens after t."""
    if not chain.is_strict:
        raise ValueError("scenario chains must be strictly decreasing")
    return int(record.key_up_to(t) == chain_key(chain))


@dataclass
class ParticleSystem:
    """One simulated n-point trajectory set on the full time grid."""

    starts: np.ndarray
    rule: str
    dt: float
    trajectories: np.ndarray  # (n, steps+1)
    bundle: WienerBundle | None = None

    @property
    def n(self) -> int:
        return len(self.starts)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.trajectories.shape[1]) * self.dt


@dataclass
class FlowBatch:
    """Replica-batched simulation output (no stored trajectories)."""

    starts: np.ndarray
    t: float
    dt: float
    construction: str
    bridge: bool
    finals: np.ndarray       # (R, n)
    ev_count: np.ndarray     # (R,)
    ev_boundary: np.ndarray  # (R, n-1) ordered by event time
    ev_time: np.ndarray      # (R, n-1)
    start_mask: int = field(default=0)

    @property
    def reps(self) -> int:
        return self.finals.shape[0]

    def scenario_keys(self, t: float | None = None) -> list[tuple[int, ...]]:
        """Per-replica ordered merge-boundary tuples up to time t."""
        if t is None:
            t = self.t
        out = []
        for r in range(self.reps):
            c = self.ev_count[r]
            bs = self.ev_boundary[r, :c]
            ts = self.ev_time[r, :c]
            out.append(tuple(int(b) for b, tau in zip(bs, ts) if tau <= t))
        return out

    def records(self) -> list[ScenarioRecord]:
        out = []
        n = self.finals.shape[1]
        for r in range(self.reps):
            c = self.ev_count[r]
            parts = [IntervalPartition.from_boundary_mask(self.start_mask, n)]
            mask = self.start_mask
            for b in self.ev_boundary[r, :c]:
                mask &= ~(1 << int(b))
                parts.append(IntervalPartition.from_boundary_mask(mask, n))
            times = _dedupe_times(float(x) for x in self.ev_time[r, :c])
            out.append(ScenarioRecord(tuple(parts), tuple(times), self.t))
        return out


def _sort_events(ev_count, ev_boundary, ev_time):
    """Stable per-replica sort of events by time."""
    R, width = ev_boundary.shape
    if width == 0:
        return ev_boundary, ev_time
    padded = np.where(np.arange(width)[None, :] < ev_count[:, None],
                      ev_time, np.inf)
    order = np.argsort(padded, axis=1, kind="stable")
    return (np.take_along_axis(ev_boundary, order, axis=1),
            np.take_along_axis(ev_time, order, axis=1))


def _weights_table(rule: LambdaRule, n: int) -> np.ndarray:
    """weights[mask, i, q] = lambda_q of the mask's partition if q lies in
    the block containing particle i, else 0 (0-based particles)."""
    size = 1 << max(n - 1, 0)
    w = np.zeros((size, n, n))
    for mask in range(size):
        p = IntervalPartition.from_boundary_mask(mask, n)
        lam = rule.vector(p)
        for b in p.blocks:
            for i in b.indices():
                for q in b.indices():
                    w[mask, i, q] = lam[q]
    return w


def _immediate_events(starts: np.ndarray) -> tuple[list[int], int]:
    """Boundaries collapsed at time zero (coinciding starts), left to right."""
    n = len(starts)
    merged = []
    mask = 0
    for j in range(n - 1):
        if starts[j + 1] - starts[j] > 0:
            mask |= 1 << j
        else:
            merged.append(j)
    return merged, mask


def simulate_lambda(starts, rule: LambdaRule, bundle: WienerBundle,
                    bridge: bool = True, replica: int = 0
                    ) -> tuple[ParticleSystem, ScenarioRecord]:
    """Single-replica lambda-rule construction driven by a bundle.

    The bundle must supply at least n components; bridge uniforms come
    from a dedicated stream keyed by (bundle seed, replica).
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    if np.any(np.diff(starts) < 0):
        raise ValueError("starts must be sorted ascending")
    if bundle.m < n:
        raise ValueError(f"bundle has m={bundle.m} < n={n} components")
    if not validate_lambda(rule, n):
        raise ValueError("lambda rule violates the unit-norm constraint")
    steps = bundle.steps
    incs = np.ascontiguousarray(bundle.increments()[:n].T[None, :, :])
    logu = None
    if bridge:
        ss = np.random.SeedSequence(bundle.seed,
                                    spawn_key=(_NS_SINGLE_UNIFORM, replica))
        u = np.random.default_rng(ss).random((1, steps, max(n - 1, 1)))
        logu = np.log(u)[:, :, :n - 1] if n > 1 else np.zeros((1, steps, 0))
    zero_merges, mask0 = _immediate_events(starts)
    weights = _weights_table(rule, n)
    x, mask, evc, evb, evt, traj = _backend.lambda_flow_steps(
        starts[None, :], [mask0], weights, incs, logu, bundle.dt, bridge,
        store_paths=True)
    evb, evt = _sort_events(evc, evb, evt)
    boundaries = zero_merges + [int(b) for b in evb[0, :evc[0]]]
    times = [0.0] * len(zero_merges) + [float(t) for t in evt[0, :evc[0]]]
    parts = [IntervalPartition.from_boundary_mask((1 << max(n - 1, 0)) - 1
                                                  if n > 1 else 0, n)]
    m = parts[0].boundary_mask()
    for b in boundaries:
        m &= ~(1 << b)
        parts.append(IntervalPartition.from_boundary_mask(m, n))
    times = _dedupe_times(times)
    record = ScenarioRecord(tuple(parts), tuple(times), bundle.horizon)
    system = ParticleSystem(starts=starts, rule=rule.name(), dt=bundle.dt,
                            trajectories=traj[0].T, bundle=bundle)
    return system, record


def _dedupe_times(times):
    """Nudging exact ties apart keeps ScenarioRecord's strict ordering."""
    out = []
    for t in times:
        if out and t <= out[-1]:
            t = math.nextafter(out[-1], math.inf)
        out.append(t)
    return out


def simulate_sequential(starts, bundle: WienerBundle, bridge: bool = True,
                        replica: int = 0
                        ) -> tuple[ParticleSystem, ScenarioRecord]:
    """Single-replica sequential gluing construction.

    Particle 1 is its Wiener path; particle j+1 follows its own path
    until the first meeting with the previously built (topmost)
    trajectory and adopts that trajectory from then on.
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    if np.any(np.diff(starts) < 0):
        raise ValueError("starts must be sorted ascending")
    if bundle.m < n:
        raise ValueError(f"bundle has m={bundle.m} < n={n} components")
    steps = bundle.steps
    incs = bundle.increments()[:n]  # (n, steps)
    logu = None
    if bridge and n > 1:
        ss = np.random.SeedSequence(bundle.seed,
                                    spawn_key=(_NS_SINGLE_UNIFORM, replica))
        logu = np.log(np.random.default_rng(ss).random((1, steps, n - 1)))
    traj, events = _sequential_core(starts, incs[None, :, :].transpose(0, 2, 1),
                                    logu, bundle.dt, bridge, store_paths=True)
    boundaries = [b for b, _ in events[0]]
    times = [t for _, t in events[0]]
    parts = [IntervalPartition.from_boundary_mask((1 << max(n - 1, 0)) - 1
                                                  if n > 1 else 0, n)]
    m = parts[0].boundary_mask()
    for b in boundaries:
        m &= ~(1 << b)
        parts.append(IntervalPartition.from_boundary_mask(m, n))
    record = ScenarioRecord(tuple(parts), tuple(_dedupe_times(times)),
                            bundle.horizon)
    system = ParticleSystem(starts=starts, rule="sequential", dt=bundle.dt,
                            trajectories=traj[0].T, bundle=bundle)
    return system, record


def _sequential_core(starts, incs, logu, dt, bridge, store_paths=False):
    """Vectorized sequential construction for a replica chunk.

    incs: (R, steps, n).  Returns (traj or finals, events) where events
    is a per-replica list of (boundary, time) sorted by time.
    """
    R, steps, n = incs.shape
    paths = np.empty((R, n, steps + 1))
    paths[:, :, 0] = starts[None, :]
    paths[:, :, 1:] = starts[None, :, None] + np.cumsum(
        incs.transpose(0, 2, 1), axis=2)

    raw_events = [[] for _ in range(R)]
    col = np.arange(steps + 1)[None, :]
    x = np.empty_like(paths)
    x[:, 0] = paths[:, 0]
    for p in range(1, n):
        top = x[:, p - 1]
        w = paths[:, p]
        if starts[p] - starts[p - 1] <= 0:
            x[:, p] = top
            for r in range(R):
                raw_events[r].append((p - 1, 0.0))
            continue
        d = w - top  # (R, steps+1)
        d0 = d[:, :-1]
        d1 = d[:, 1:]
        hit = d1 <= 0.0
        if bridge:
            hit |= (d1 > 0.0) & (logu[:, :, p - 1] * dt < -(d0 * d1))
        any_hit = hit.any(axis=1)
        first = np.where(any_hit, hit.argmax(axis=1), steps)
        glued = any_hit[:, None] & (col > first[:, None])
        x[:, p] = np.where(glued, top, w)
        rows = np.nonzero(any_hit)[0]
        dj0 = d0[rows, first[rows]]
        dj1 = d1[rows, first[rows]]
        denom = dj0 - dj1
        theta = np.where(dj1 <= 0.0,
                         np.where(denom > 0, dj0 / np.where(denom > 0, denom, 1.0), 0.5),
                         0.5)
        taus = (first[rows] + theta) * dt
        for r, tau in zip(rows, taus):
            raw_events[r].append((p - 1, float(tau)))

    events = [sorted(ev, key=lambda bt: (bt[1], bt[0])) for ev in raw_events]
    if store_paths:
        return x.transpose(0, 2, 1), events
    return x[:, :, -1], events


def simulate_lambda_batch(starts, rule: LambdaRule, reps: int, t: float,
                          dt: float, seed: int, bridge: bool = True,
                          chunk: int = DEFAULT_CHUNK) -> FlowBatch:
    """Replica-batched lambda-rule construction (finals and events only)."""
    starts = np.asarray(starts, float)
    n = len(starts)
    if np.any(np.diff(starts) < 0):
        raise ValueError("starts must be sorted ascending")
    if not validate_lambda(rule, n):
        raise ValueError("lambda rule violates the unit-norm constraint")
    steps = _resolve_steps(t, dt, what="t")
    weights = _weights_table(rule, n)
    _, mask0 = _immediate_events(starts)

    finals = np.empty((reps, n))
    width = max(n - 1, 1)
    all_evb = np.zeros((reps, width), np.int64)
    all_evt = np.zeros((reps, width))
    all_evc = np.zeros(reps, np.int64)
    logu_iter = (log_uniform_chunks(reps, steps, max(n - 1, 1), seed, chunk)
                 if bridge else None)
    for lo, incs in increment_chunks(reps, steps, n, dt, seed, chunk):
        rows = incs.shape[0]
        logu = next(logu_iter)[1][:, :, :n - 1] if bridge else None
        x0 = np.repeat(starts[None, :], rows, axis=0)
        x, mask, evc, evb, evt, _ = _backend.lambda_flow_steps(
            x0, np.full(rows, mask0, np.int64), weights, incs, logu, dt,
            bridge, store_paths=False)
        evb, evt = _sort_events(evc, evb, evt)
        finals[lo:lo + rows] = x
        all_evb[lo:lo + rows] = evb
        all_evt[lo:lo + rows] = evt
        all_evc[lo:lo + rows] = evc
    return FlowBatch(starts=starts, t=t, dt=dt, construction="lambda",
                     bridge=bridge, finals=finals, ev_count=all_evc,
                     ev_boundary=all_evb, ev_time=all_evt, start_mask=mask0)


def simulate_sequential_batch(starts, reps: int, t: float, dt: float,
                              seed: int, bridge: bool = True,
                              chunk: int = DEFAULT_CHUNK) -> FlowBatch:
    """Replica-batched sequential construction (finals and events only)."""
    starts = np.asarray(starts, float)
    n = len(starts)
    if np.any(np.diff(starts) < 0):
        raise ValueError("starts must be sorted ascending")
    steps = _resolve_steps(t, dt, what="t")
    finals = np.empty((reps, n))
    width = max(n - 1, 1)
    all_evb = np.zeros((reps, width), np.int64)
    all_evt = np.zeros((reps, width))
    all_evc = np.zeros(reps, np.int64)
    _, mask0 = _immediate_events(starts)
    logu_iter = (log_uniform_chunks(reps, steps, max(n - 1, 1), seed, chunk)
                 if bridge else None)
    for lo, incs in increment_chunks(reps, steps, n, dt, seed, chunk):
        rows = incs.shape[0]
        logu = next(logu_iter)[1] if bridge else None
        fin, events = _sequential_core(starts, incs, logu, dt, bridge)
        finals[lo:lo + rows] = fin
        for r, ev in enumerate(events):
            ev = [e for e in ev if e[1] > 0.0]  # zero-time merges via mask0
            all_evc[lo + r] = len(ev)
            for i, (b, tau) in enumerate(ev):
                all_evb[lo + r, i] = b
                all_evt[lo + r, i] = tau
    return FlowBatch(starts=starts, t=t, dt=dt, construction="sequential",
                     bridge=bridge, finals=finals, ev_count=all_evc,
                     ev_boundary=all_evb, ev_time=all_evt, start_mask=mask0)


# ---------------------------------------------------------------------------
# single-particle absorption (stopped Wiener process)
# ---------------------------------------------------------------------------

def stopped_values(u: float, incs: np.ndarray, logu: np.ndarray | None,
                   dt: float, bridge: bool = True) -> np.ndarray:
    """Endpoint of the Wiener path started at u and absorbed at zero.

    incs: (R, steps) increments; logu: (R, steps) log-uniforms for the
    bridge test (variance rate 1).  Returns (R,) values w~(t): 0 for
    absorbed paths, the free endpoint otherwise.
    """
    if u < 0:
        raise ValueError("start must be nonnegative")
    R, steps = incs.shape
    path = np.empty((R, steps + 1))
    path[:, 0] = u
    path[:, 1:] = u + np.cumsum(incs, axis=1)
    x0 = path[:, :-1]
    x1 = path[:, 1:]
    hit = (x1 <= 0.0) | (x0 <= 0.0)
    if bridge:
        if logu is None:
            raise ValueError("bridge correction requires log-uniform draws")
        hit |= (x1 > 0.0) & (x0 > 0.0) & (logu * dt < -2.0 * x0 * x1)
    absorbed = hit.any(axis=1)
    return np.where(absorbed, 0.0, path[:, -1])


def stopped_endpoints(u: float, t: float, dt: float, seed: int, reps: int,
                      bridge: bool = True,
                      chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Sample w~(t) for `reps` independent paths started at u >= 0."""
    steps = _resolve_steps(t, dt, what="t")
    out = np.empty(reps)
    logu_iter = (log_uniform_chunks(reps, steps, 1, seed, chunk)
                 if bridge else None)
    for lo, incs in increment_chunks(reps, steps, 1, dt, seed, chunk):
        rows = incs.shape[0]
        logu = next(logu_iter)[1][:, :, 0] if bridge else None
        out[lo:lo + rows] = stopped_values(u, incs[:, :, 0], logu, dt, bridge)
    return out
