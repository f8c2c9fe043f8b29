"""Seeded Wiener noise, iterated Ito integrals and the Fourier-Wiener pairing.

Reproducibility contract: every random draw descends from one root
SeedSequence through namespaced spawn keys, so identical (seed,
parameters) gives identical output regardless of how replicas are
scheduled.  Bundles split the root per (replica, component); replica
batches split it per fixed-size replica chunk, with bridge-correction
uniforms on a separate namespace so toggling the bridge flag never
changes the Wiener increments drawn for a given seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _backend

__all__ = [
    "WienerBundle",
    "SimplexKernel",
    "sample_bundle",
    "increment_chunks",
    "log_uniform_chunks",
    "iterated_integral",
    "prefix_simplex_sum",
    "coarse_cell_edges",
    "aggregate_increments",
    "stochastic_exponent",
    "fourier_wiener_pairing",
    "simplex_integral",
    "write_bundle_csv",
]

# spawn-key namespaces under the root seed
_NS_BUNDLE = 1
_NS_BATCH = 2
_NS_UNIFORM = 3

DEFAULT_CHUNK = 4096
MAX_PAIRING_ORDER = 4

#: default quadrature nodes per axis for the Fourier-Wiener pairing
_PAIRING_POINTS = {1: 2049, 2: 513, 3: 129, 4: 33}

#: default coarse-cell counts for tensor simplex sums
_DEFAULT_CELLS = {2: 64, 3: 32, 4: 16}


def _resolve_steps(total: float, dt: float, what: str = "horizon") -> int:
    steps = int(round(total / dt))
    if steps < 1 or abs(steps * dt - total) > 1e-9 * max(1.0, abs(total)):
        raise ValueError(f"{what} {total} is not a positive multiple of dt={dt}")
    return steps


@dataclass
class WienerBundle:
    """m independent discretized Wiener paths on a common time grid."""

    m: int
    horizon: float
    dt: float
    paths: np.ndarray  # (m, steps+1)
    seed: int
    starts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.starts is None:
            self.starts = np.zeros(self.m)
        self.paths = np.asarray(self.paths, float)
        self.starts = np.asarray(self.starts, float)
        if self.paths.shape != (self.m, self.steps + 1):
            raise ValueError("paths shape does not match m and horizon/dt")

    @property
    def steps(self) -> int:
        return _resolve_steps(self.horizon, self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def increments(self) -> np.ndarray:
        """(m, steps) array of path increments."""
        return np.diff(self.paths, axis=1)

    def component(self, i: int) -> np.ndarray:
        """Path of component i (1-based)."""
        if not 1 <= i <= self.m:
            raise ValueError(f"component {i} out of range 1..{self.m}")
        return self.paths[i - 1]


def sample_bundle(m: int, horizon: float, dt: float, seed: int,
                  starts: Sequence[float] | None = None,
                  replica: int = 0) -> WienerBundle:
    """Sample a bundle of m independent Wiener paths.

    Deterministic: the stream for component k of replica r is spawned
    from the root seed with key (bundle, r, k).
    """
    if m < 1:
        raise ValueError("need m >= 1")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if horizon < dt:
        raise ValueError("horizon must be at least dt")
    steps = _resolve_steps(horizon, dt)
    if starts is None:
        starts = np.zeros(m)
    starts = np.asarray(starts, float)
    if starts.shape != (m,):
        raise ValueError(f"starts must have length m={m}")

    paths = np.empty((m, steps + 1))
    paths[:, 0] = starts
    sd = math.sqrt(dt)
    for k in range(m):
        ss = np.random.SeedSequence(seed, spawn_key=(_NS_BUNDLE, replica, k))
        incs = np.random.default_rng(ss).standard_normal(steps) * sd
        paths[k, 1:] = starts[k] + np.cumsum(incs)
    return WienerBundle(m=m, horizon=horizon, dt=dt, paths=paths, seed=seed,
                        starts=starts)


def increment_chunks(reps: int, steps: int, m: int, dt: float, seed: int,
                     chunk: int = DEFAULT_CHUNK):
    """Yield (start_row, incs) with incs of shape (rows, steps, m).

    Chunk c draws from spawn key (batch, c); the layout inside a chunk is
    replica-major, so the numbers any replica sees are a pure function of
    (seed, steps, m, chunk size).
    """
    sd = math.sqrt(dt)
    for c, lo in enumerate(range(0, reps, chunk)):
        rows = min(chunk, reps - lo)
        ss = np.random.SeedSequence(seed, spawn_key=(_NS_BATCH, c))
        incs = np.random.default_rng(ss).standard_normal((rows, steps, m)) * sd
        yield lo, incs


def log_uniform_chunks(reps: int, steps: int, gaps: int, seed: int,
                       chunk: int = DEFAULT_CHUNK):
    """Yield (start_row, logu) with logu = log U, U uniform on (0,1),
    shape (rows, steps, gaps).  Separate namespace from increments."""
    for c, lo in enumerate(range(0, reps, chunk)):
        rows = min(chunk, reps - lo)
        ss = np.random.SeedSequence(seed, spawn_key=(_NS_UNIFORM, c))
        u = np.random.default_rng(ss).random((rows, steps, gaps))
        np.log(u, out=u)
        yield lo, u


# ---------------------------------------------------------------------------
# iterated Ito integrals
# ---------------------------------------------------------------------------

@dataclass
class SimplexKernel:
    """Order-k kernel on the simplex 0 <= tau_1 <= ... <= tau_k <= t.

    evaluator takes k time arguments (numpy-broadcastable; scalar-only
    callables are wrapped transparently) and returns the kernel value.
    components are 1-based Wiener component indices, one per time axis.
    Optional factors (k one-argument callables) mark the kernel as a
    product f_1(tau_1)...f_k(tau_k), enabling the exact prefix scheme.
    """

    order: int
    components: tuple[int, ...]
    evaluator: Callable | float
    factors: Sequence[Callable] | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("kernel order must be >= 1")
        if len(self.components) != self.order:
            raise ValueError("need one component index per time axis")
        if self.factors is not None and len(self.factors) != self.order:
            raise ValueError("need one factor per time axis")

    def evaluate(self, *times: np.ndarray) -> np.ndarray:
        if not callable(self.evaluator):
            return np.broadcast_to(float(self.evaluator),
                                   np.broadcast_shapes(*(t.shape for t in times)))
        try:
            out = np.asarray(self.evaluator(*times), float)
            if out.shape == np.broadcast_shapes(*(t.shape for t in times)):
                return out
        except (TypeError, ValueError):
            pass
        return np.vectorize(self.evaluator, otypes=[float])(*times)


def prefix_simplex_sum(z_list: Sequence[np.ndarray]) -> np.ndarray:
    """Exact strict-simplex sum sum_{s_1<...<s_k} z_1(s_1)...z_k(s_k).

    Each z_j is (..., steps); the inner integral is accumulated forward,
    O(steps * k).  Returns an array of the leading shape.
    """
    acc = None
    for z in z_list[:-1]:
        w = z if acc is None else z * acc
        acc = np.zeros_like(w)
        acc[..., 1:] = np.cumsum(w, axis=-1)[..., :-1]
    w = z_list[-1] if acc is None else z_list[-1] * acc
    return w.sum(axis=-1)


def coarse_cell_edges(steps: int, cells: int) -> np.ndarray:
    """Fine-step indices of coarse-cell boundaries (length cells+1)."""
    if cells > steps:
        cells = steps
    return np.round(np.linspace(0, steps, cells + 1)).astype(int)


def aggregate_increments(incs: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sum fine increments (..., steps) into coarse cells (..., cells)."""
    return np.add.reduceat(incs, edges[:-1], axis=-1)


def _kernel_tensor(kernel: SimplexKernel, left_times: np.ndarray) -> np.ndarray:
    k = kernel.order
    mesh = np.meshgrid(*([left_times] * k), indexing="ij")
    return kernel.evaluate(*mesh)


def iterated_integral(kernel: SimplexKernel, bundle: WienerBundle, t: float,
                      cells: int | None = None) -> float:
    """Left-point Ito discretization of the iterated integral over the
    simplex, with strict inequality between grid cells.

    Constant kernels (detected from the evaluated tensor) and explicit
    product kernels use the exact forward prefix scheme on the bundle's
    fine grid.  General kernels are summed over a coarsened cell grid
    (kernel at cell left endpoints, increments aggregated per cell).
    """
    if t > bundle.horizon + 1e-12:
        raise ValueError(f"t={t} beyond bundle horizon {bundle.horizon}")
    for i in kernel.components:
        if not 1 <= i <= bundle.m:
            raise ValueError(f"component {i} out of range 1..{bundle.m}")
    steps_t = _resolve_steps(t, bundle.dt, what="t")
    k = kernel.order
    fine = bundle.increments()[:, :steps_t]
    fine_times = np.arange(steps_t) * bundle.dt
    axes_incs = [fine[i - 1] for i in kernel.components]

    if kernel.factors is not None:
        z = [f(fine_times) * x for f, x in zip(kernel.factors, axes_incs)]
        return float(prefix_simplex_sum(z))

    if cells is None:
        cells = steps_t if k == 1 else min(steps_t, _DEFAULT_CELLS.get(k, 16))
    cells = min(cells, steps_t)
    edges = coarse_cell_edges(steps_t, cells)
    left = edges[:-1] * bundle.dt
    tensor = _kernel_tensor(kernel, left)

    scale = np.max(np.abs(tensor))
    if scale == 0.0:
        return 0.0
    if np.ptp(tensor) <= 1e-9 * scale:
        c = float(tensor.flat[0])
        return float(c * prefix_simplex_sum(axes_incs))

    if k == 1:
        fine_tensor = kernel.evaluate(fine_times)
        return float(fine_tensor @ axes_incs[0])

    coarse = [aggregate_increments(x, edges)[None, :] for x in axes_incs]
    return float(_backend.simplex_sum(tensor, coarse)[0])


# ---------------------------------------------------------------------------
# stochastic exponent and the Fourier-Wiener pairing
# ---------------------------------------------------------------------------

def _phi_values(phi, times: np.ndarray) -> np.ndarray:
    if callable(phi):
        return np.broadcast_to(np.asarray(phi(times), float), times.shape)
    return np.full(times.shape, float(phi))


def stochastic_exponent(phi, bundle: WienerBundle, t: float,
                        component: int = 1) -> float:
    """exp(int phi dw - 1/2 int phi^2 ds), left-point discretized."""
    steps_t = _resolve_steps(t, bundle.dt, what="t")
    if not 1 <= component <= bundle.m:
        raise ValueError(f"component {component} out of range 1..{bundle.m}")
    times = np.arange(steps_t) * bundle.dt
    ph = _phi_values(phi, times)
    dw = bundle.increments()[component - 1, :steps_t]
    return float(np.exp(ph @ dw - 0.5 * (ph @ ph) * bundle.dt))


def simplex_integral(evaluator, k: int, t: float,
                     points: int | None = None) -> float:
    """Quadrature of a k-argument function over the simplex Delta_k(0;t)
    by nested cumulative trapezoid rules."""
    if k == 0:
        raise ValueError("order must be >= 1")
    if k > MAX_PAIRING_ORDER:
        raise ValueError(
            f"order {k} exceeds the configured quadrature maximum "
            f"{MAX_PAIRING_ORDER}")
    if points is None:
        points = _PAIRING_POINTS[k]
    s = np.linspace(0.0, t, points)
    h = s[1] - s[0]
    mesh = np.meshgrid(*([s] * k), indexing="ij")
    tensor = np.asarray(evaluator(*mesh), float)
    if tensor.shape != (points,) * k:
        tensor = np.vectorize(evaluator, otypes=[float])(*mesh)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    for _ in range(k - 1):
        cum = np.zeros_like(tensor)
        cum[1:] = np.cumsum(0.5 * h * (tensor[1:] + tensor[:-1]), axis=0)
        tensor = np.einsum("ii...->i...", cum)
    return float(trapezoid(tensor, dx=h))


def fourier_wiener_pairing(a0: float, kernels: Sequence[SimplexKernel], phi,
                           t: float, points: int | None = None) -> float:
    """a0 + sum_k int_{Delta_k} a_k(r) phi(r_1)...phi(r_k) dr.

    This is the analytic side of E[alpha E(phi)]; kernels above order
    MAX_PAIRING_ORDER are rejected.
    """
    total = float(a0)
    for kern in kernels:
        k = kern.order

        def integrand(*times, _kern=kern):
            out = _kern.evaluate(*times)
            for tau in times:
                out = out * _phi_values(phi, tau)
            return out

        total += simplex_integral(integrand, k, t, points=points)
    return total


def write_bundle_csv(bundle: WienerBundle, path: str):
    """Dump as CSV with header step,t,w1,...,wm."""
    header = "step,t," + ",".join(f"w{k + 1}" for k in range(bundle.m))
    times = bundle.times
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for j in range(bundle.steps + 1):
            vals = ",".join(format(x, ".17g") for x in bundle.paths[:, j])
            fh.write(f"{j},{format(times[j], '.17g')},{vals}\n")
