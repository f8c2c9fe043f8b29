"""Grid functions and the semigroup/derivative operator algebra.

Three one-dimensional expectation semigroups are provided on uniform
grids: the heat semigroup, the Ornstein-Uhlenbeck semigroup, and the
semigroup of the Wiener process absorbed at zero (method of images plus
an atom at the origin carrying the absorbed mass).  On top of these sit
the pointwise derivative, block derivatives for multi-dimensional grid
functions, and the alternating semigroup/derivative kernel pipelines
used by the chaos expansions.

Quadrature is the trapezoid rule on the uniform grid; callers are
expected to choose windows that cover roughly six standard deviations of
the transition kernel beyond the region they evaluate on, which keeps
truncation error below quadrature error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .partitions import IntervalPartition, block_of

__all__ = [
    "GridAxis",
    "Grid",
    "GridFunction",
    "SemigroupSpec",
    "apply_semigroup",
    "semigroup_matrix",
    "derivative",
    "block_derivative",
    "kernel_pipeline",
    "absorption_mass",
    "write_grid_function_csv",
    "read_grid_function_csv",
]

_ROW_CHUNK = 512  # rows of the quadrature kernel built at a time


@dataclass(frozen=True)
class GridAxis:
    """Uniform 1-D axis lo..hi with `points` nodes."""

    lo: float
    hi: float
    points: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.points < 3:
            raise ValueError("need at least 3 grid points")

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.points - 1)

    def nodes(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.points)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.points, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


@dataclass(frozen=True)
class Grid:
    """Tensor grid of up to three uniform axes."""

    axes: tuple[GridAxis, ...]

    def __post_init__(self):
        if not 1 <= len(self.axes) <= 3:
            raise ValueError("grids support 1 to 3 dimensions")

    @classmethod
    def regular(cls, lo: float, hi: float, points: int, dim: int = 1) -> "Grid":
        return cls((GridAxis(lo, hi, points),) * dim)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.points for ax in self.axes)


class GridFunction:
    """Real-valued function sampled on a Grid.  Values are treated as
    immutable; operations return new instances."""

    def __init__(self, grid: Grid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ValueError(
                f"values shape {values.shape} does not match grid {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid function contains non-finite values")
        self.grid = grid
        self.values = values

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        if grid.dim == 1:
            vals = fn(grid.axes[0].nodes())
        else:
            mesh = np.meshgrid(*(ax.nodes() for ax in grid.axes), indexing="ij")
            vals = fn(*mesh)
        return cls(grid, np.broadcast_to(np.asarray(vals, float), grid.shape).copy())

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.grid, values)

    def __call__(self, *point: float) -> float:
        """Evaluate by multilinear interpolation."""
        if len(point) != self.grid.dim:
            raise ValueError(f"expected {self.grid.dim} coordinates")
        vals = self.values
        for d, (x, ax) in enumerate(zip(point, self.grid.axes)):
            if not (ax.lo - 1e-12 <= x <= ax.hi + 1e-12):
                raise ValueError(f"coordinate {x} outside axis [{ax.lo}, {ax.hi}]")
            pos = (x - ax.lo) / ax.h
            j = min(int(pos), ax.points - 2)
            frac = pos - j
            sl = vals.take(j, axis=0)
            sr = vals.take(j + 1, axis=0)
            vals = (1.0 - frac) * sl + frac * sr
        return float(vals)

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True)
class SemigroupSpec:
    """Which expectation semigroup to use: heat, ou(theta), or absorbed."""

    kind: str
    theta: float | None = None

    def __post_init__(self):
        if self.kind not in ("heat", "ou", "absorbed"):
            raise ValueError(f"unknown semigroup kind {self.kind!r}")
        if self.kind == "ou":
            if self.theta is None or self.theta <= 0:
                raise ValueError("ou semigroup needs theta > 0")
        elif self.theta is not None:
            raise ValueError("theta is only meaningful for the ou kind")


def _gauss_density(x: np.ndarray, var: float) -> np.ndarray:
    return np.exp(-x * x / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def absorption_mass(u: np.ndarray, t: float) -> np.ndarray:
    """P_u(Wiener process started at u >= 0 hits 0 by time t) = 2 Phi(-u/sqrt t)."""
    from scipy.special import erfc

    u = np.asarray(u, dtype=float)
    if t <= 0:
        return np.where(u <= 0, 1.0, 0.0)
    return erfc(u / math.sqrt(2.0 * t))


def _check_absorbed_grid(axis: GridAxis):
    if abs(axis.lo) > 1e-12:
        raise ValueError("absorbed semigroup requires a grid with lo = 0")


def _transition_rows(spec: SemigroupSpec, u: np.ndarray, v: np.ndarray,
                     t: float) -> np.ndarray:
    """Transition density rows p(u_i -> v_j) for the continuous part."""
    if spec.kind == "heat":
        return _gauss_density(v[None, :] - u[:, None], t)
    if spec.kind == "ou":
        decay = math.exp(-spec.theta * t)
        var = (1.0 - math.exp(-2.0 * spec.theta * t)) / (2.0 * spec.theta)
        return _gauss_density(v[None, :] - decay * u[:, None], var)
    # absorbed: image-method killed kernel, nonnegative for u, v >= 0
    return (_gauss_density(v[None, :] - u[:, None], t)
            - _gauss_density(v[None, :] + u[:, None], t))


def apply_semigroup(spec: SemigroupSpec, f: GridFunction, t: float,
                    killed: bool = False) -> GridFunction:
    """Evaluate T_t f by trapezoid quadrature against the transition kernel.

    t = 0 returns f unchanged.  The absorbed kind adds the origin atom
    f(0) * P_u(hit by t) and requires the grid to start at 0; killed=True
    drops the atom, giving the Dirichlet (killed-at-zero) semigroup used
    between derivative slots in chaos-kernel pipelines.  killed is
    meaningless (and ignored) for the boundaryless kinds.
    """
    if t < 0:
        raise ValueError(f"negative time {t}")
    if f.grid.dim != 1:
        raise ValueError("semigroups act on one-dimensional grid functions")
    axis = f.grid.axes[0]
    if spec.kind == "absorbed":
        _check_absorbed_grid(axis)
    if t == 0.0:
        return f

    u = axis.nodes()
    v = u
    weighted = f.values * axis.trapezoid_weights()
    out = np.empty_like(f.values)
    for i0 in range(0, axis.points, _ROW_CHUNK):
        i1 = min(i0 + _ROW_CHUNK, axis.points)
        rows = _transition_rows(spec, u[i0:i1], v, t)
        out[i0:i1] = rows @ weighted
    if spec.kind == "absorbed" and not killed:
        out += f.values[0] * absorption_mass(u, t)
    return f.with_values(out)


def semigroup_matrix(spec: SemigroupSpec, axis: GridAxis, t: float,
                     killed: bool = False) -> np.ndarray:
    """Dense matrix M with (M @ values) == apply_semigroup values.

    Used to build kernel caches, where one small step matrix is applied
    repeatedly (forward and in adjoint form).
    """
    if t < 0:
        raise ValueError(f"negative time {t}")
    u = axis.nodes()
    if t == 0.0:
        return np.eye(axis.points)
    if spec.kind == "absorbed":
        _check_absorbed_grid(axis)
    m = _transition_rows(spec, u, u, t) * axis.trapezoid_weights()[None, :]
    if spec.kind == "absorbed" and not killed:
        m[:, 0] += absorption_mass(u, t)
    return m


def derivative(f: GridFunction, axis: int = 0) -> GridFunction:
    """Grid derivative along an axis: central differences in the interior,
    one-sided second order at the boundary."""
    if not 0 <= axis < f.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.grid.dim}")
    h = f.grid.axes[axis].h
    return f.with_values(np.gradient(f.values, h, axis=axis, edge_order=2))


def block_derivative(f: GridFunction, p: IntervalPartition, i: int) -> GridFunction:
    """Sum of partials over the block of p containing i (1-based).

    The grid dimension must equal p.n; each element of the block
    corresponds to one grid axis.
    """
    if f.grid.dim != p.n:
        raise ValueError(
            f"grid dimension {f.grid.dim} does not match partition over n={p.n}")
    b = block_of(p, i)
    out = np.zeros_like(f.values)
    for q in b.indices():
        out += np.gradient(f.values, f.grid.axes[q].h, axis=q, edge_order=2)
    return f.with_values(out)


def _as_coefficient(b, f: GridFunction) -> np.ndarray:
    if isinstance(b, GridFunction):
        if b.grid.shape != f.grid.shape:
            raise ValueError("coefficient grid does not match function grid")
        return b.values
    return np.full(f.grid.shape, float(b))


def kernel_pipeline(spec: SemigroupSpec, b, f: GridFunction, t: float,
                    times) -> GridFunction:
    """Alternating semigroup/generator composition for a time tuple.

    For times (r_1 <= ... <= r_k) in [0, t] this evaluates

        T_{r_1} A T_{r_2-r_1} A ... A T_{t-r_k} f,

    innermost first, with A g = b * (d/dv) g.  k = 0 reduces to T_t f.
    For the absorbed kind the applications after each derivative use the
    killed semigroup: the chaos kernels come from a boundary problem with
    a zero Dirichlet condition, and the boundary atom belongs only to the
    innermost slot (where it reduces to the constant f(0), which the
    following derivative kills anyway).
    """
    times = [float(r) for r in times]
    if any(r < -1e-15 for r in times) or any(r > t + 1e-12 for r in times):
        raise ValueError(f"times {times} outside [0, {t}]")
    if any(a > b_ + 1e-15 for a, b_ in zip(times, times[1:])):
        raise ValueError(f"times {times} are not sorted")
    if not times:
        return apply_semigroup(spec, f, t)

    coeff = _as_coefficient(b, f)
    g = apply_semigroup(spec, f, t - times[-1])
    for left, right in zip(reversed(times[:-1]), reversed(times[1:])):
        g = g.with_values(coeff * derivative(g).values)
        g = apply_semigroup(spec, g, right - left, killed=True)
    g = g.with_values(coeff * derivative(g).values)
    return apply_semigroup(spec, g, times[0], killed=True)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def write_grid_function_csv(f: GridFunction, path: str):
    """Dump as CSV with header u[,u2[,u3]],value, row-major order."""
    cols = ["u", "u2", "u3"][: f.grid.dim]
    mesh = np.meshgrid(*(ax.nodes() for ax in f.grid.axes), indexing="ij")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols + ["value"]) + "\n")
        flat = [m.ravel() for m in mesh] + [f.values.ravel()]
        for row in zip(*flat):
            fh.write(",".join(format(x, ".17g") for x in row) + "\n")


def read_grid_function_csv(path: str) -> GridFunction:
    """Inverse of write_grid_function_csv (requires a full tensor grid)."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = list(data.dtype.names)
    if names[-1] != "value":
        raise ValueError(f"{path}: last column must be 'value'")
    coords = [np.asarray(data[name], float) for name in names[:-1]]
    values = np.asarray(data["value"], float)
    axes = []
    sizes = []
    for c in coords:
        uniq = np.unique(c)
        axes.append(GridAxis(float(uniq[0]), float(uniq[-1]), len(uniq)))
        sizes.append(len(uniq))
    if int(np.prod(sizes)) != values.size:
        raise ValueError(f"{path}: rows do not form a full tensor grid")
    grid = Grid(tuple(axes))
    return GridFunction(grid, values.reshape(grid.shape))
