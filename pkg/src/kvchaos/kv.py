"""Truncated Krylov-Veretennikov (Ito-Wiener chaos) expansions.

Four families are implemented:

- the generic flat/OU-case series, kernels T_{r1} A T_{r2-r1} ... A T_{t-rk} f
  with A = b d/dv (theorem11_series);
- the stopped-at-zero Wiener series with the absorbed semigroup and A = d/dv
  (stopped_wiener_series);
- the matrix Lie-group series I + sum_k Z^k I_k(t) for dG = G Z dw
  (lie_series, extract_driver);
- orders 0 and 1 of the n-point Arratia expansion over partition chains
  (scenario_semigroup, theorem31_series); order >= 2 kernels can be built
  but their integration is refused as numerically unverified.

Pipeline kernels are precomputed on a tensor time grid and interpolated
inside iterated integrals; the cache build uses one small semigroup step
matrix applied forward for the function side and in adjoint form for the
evaluation-point side, so an order-3 tensor costs O(G^2) matrix-vector
products instead of O(G^3) pipeline evaluations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .flow import chain_key, simulate_lambda_batch
from .noise import (DEFAULT_CHUNK, WienerBundle, aggregate_increments,
                    coarse_cell_edges, increment_chunks, log_uniform_chunks,
                    prefix_simplex_sum, simplex_integral, _resolve_steps)
from .partitions import (IntervalPartition, LambdaRule, PartitionChain,
                         enumerate_chains, validate_lambda)
from .semigroup import (Grid, GridAxis, GridFunction, SemigroupSpec,
                        apply_semigroup, derivative, semigroup_matrix)

__all__ = [
    "ExpansionSpec",
    "PipelineKernelCache",
    "SeriesResult",
    "ScenarioSemigroupEstimate",
    "theorem11_series",
    "theorem11_series_batch",
    "stopped_wiener_series",
    "stopped_wiener_series_batch",
    "lie_series",
    "extract_driver",
    "scenario_semigroup",
    "theorem31_series",
    "theorem31_order0",
    "theorem31_order1_kernels",
    "theorem31_kernel",
    "euler_multiplicative_path",
    "OrderNotVerifiedError",
]

DEFAULT_CACHE_POINTS = {1: 129, 2: 48, 3: 32}
MAX_SERIES_ORDER = 3
_CONST_RTOL = 1e-7


class OrderNotVerifiedError(ValueError):
    """Raised when integration is requested beyond the verified order."""


@dataclass(frozen=True)
class ExpansionSpec:
    """What to expand: semigroup kind, generator, truncation, and where."""

    semigroup: SemigroupSpec
    b: object = 1.0          # coefficient of A = b d/dv (GridFunction or scalar)
    order: int = 1
    u: float = 0.0
    t: float = 1.0

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("truncation order must be >= 0")
        if self.t <= 0:
            raise ValueError("horizon must be positive")


def _derivative_matrix(axis: GridAxis) -> np.ndarray:
    """Dense matrix of the grid derivative (central interior, one-sided
    second order at the edges); needed in transposed form for adjoints."""
    p, h = axis.points, axis.h
    d = np.zeros((p, p))
    for i in range(1, p - 1):
        d[i, i - 1] = -0.5 / h
        d[i, i + 1] = 0.5 / h
    d[0, 0], d[0, 1], d[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    d[-1, -1], d[-1, -2], d[-1, -3] = 1.5 / h, -2.0 / h, 0.5 / h
    return d


def _interp_row(axis: GridAxis, u: float) -> np.ndarray:
    """Row vector e_u with e_u @ values = linear interpolation at u."""
    if not axis.lo - 1e-12 <= u <= axis.hi + 1e-12:
        raise ValueError(f"evaluation point {u} outside grid [{axis.lo}, {axis.hi}]")
    pos = (u - axis.lo) / axis.h
    j = min(int(pos), axis.points - 2)
    frac = pos - j
    row = np.zeros(axis.points)
    row[j] = 1.0 - frac
    row[j + 1] = frac
    return row


class PipelineKernelCache:
    """Chaos kernels of f(u + noise-driven motion) on tensor time grids.

    For each order k <= max_order, tensor(k) holds
    a_k(tau_{j1},...,tau_{jk}) = [T_{tau_{j1}} A ... A T_{t-tau_{jk}} f](u)
    on the order's uniform node grid over [0, t].  For the absorbed kind
    every semigroup slot after a derivative is the killed (Dirichlet)
    semigroup; the innermost slot keeps the boundary atom, which only
    feeds the constant f(0) into the following derivative.  The
    evaluation-side vector at the tau_1 = 0 node is the right-limit of
    T_{tau_1} as tau_1 decreases to 0, which at the absorbing point u = 0
    is 0 (a path started on the boundary is dead immediately), making all
    kernels vanish there.
    """

    def __init__(self, spec: SemigroupSpec, b, f: GridFunction, t: float,
                 u: float, max_order: int,
                 points: dict[int, int] | None = None):
        if max_order > MAX_SERIES_ORDER:
            raise OrderNotVerifiedError(
                f"kernel caches support orders <= {MAX_SERIES_ORDER}")
        if f.grid.dim != 1:
            raise ValueError("pipeline kernels need a one-dimensional f")
        self.spec = spec
        self.t = float(t)
        self.u = float(u)
        self.max_order = max_order
        axis = f.grid.axes[0]
        self.axis = axis
        pts = dict(DEFAULT_CACHE_POINTS)
        if points:
            pts.update(points)
        self.points = pts
        if isinstance(b, GridFunction):
            bvals = b.values
        else:
            bvals = np.full(axis.points, float(b))
        self._bvals = bvals
        dmat_t = _derivative_matrix(axis).T
        self._tensors: dict[int, np.ndarray] = {}
        self._nodes: dict[int, np.ndarray] = {}

        absorbed = spec.kind == "absorbed"
        e_u = _interp_row(axis, u)
        e_u_lim = e_u.copy()
        if absorbed:
            e_u_lim[0] = 0.0
        h = axis.h

        def fwd_a(vec):
            return bvals * np.gradient(vec, h, edge_order=2)

        def adj_a(vec):
            return dmat_t @ (bvals * vec)

        self.value0 = float(e_u @ apply_semigroup(spec, f, t).values)

        for k in range(1, max_order + 1):
            g = pts[k]
            nodes = np.linspace(0.0, t, g)
            self._nodes[k] = nodes
            if g < 2:
                raise ValueError("kernel grids need at least 2 nodes")
            delta = t / (g - 1)
            m_full = semigroup_matrix(spec, axis, delta)
            m = (semigroup_matrix(spec, axis, delta, killed=True)
                 if absorbed else m_full)
            # function side: D1[j] = A T_{t - tau_j} f (full semigroup)
            gj = f.values.copy()
            fwd = [gj]
            for _ in range(g - 1):
                gj = m_full @ gj
                fwd.append(gj)
            d1 = np.array([fwd_a(fwd[g - 1 - j]) for j in range(g)])
            # evaluation side: a_j = (M^T)^j e_u, right-limit row at j = 0
            a = e_u_lim.copy()
            adj = [a]
            for _ in range(g - 1):
                a = m.T @ a
                adj.append(a)
            if k == 1:
                self._tensors[1] = np.einsum("jp,jp->j", np.array(adj), d1)
                continue
            # c[j1, j2] = (M^T)^(j2-j1) A^T a_j1
            c = np.zeros((g, g, axis.points))
            for j1 in range(g):
                v = adj_a(adj[j1])
                c[j1, j1] = v
                for j2 in range(j1 + 1, g):
                    v = m.T @ v
                    c[j1, j2] = v
            if k == 2:
                tensor = np.einsum("abp,bp->ab", c, d1)
                iu = np.triu_indices(g, k=0)
                mask = np.zeros((g, g))
                mask[iu] = 1.0
                self._tensors[2] = tensor * mask
                continue
            # k == 3: D2[j2, j3] = A M^(j3-j2) D1[j3], killed mid slots
            d2 = np.zeros((g, g, axis.points))
            for j3 in range(g):
                w = d1[j3].copy()
                for j2 in range(j3, -1, -1):
                    d2[j2, j3] = fwd_a(w)
                    if j2 > 0:
                        w = m @ w
            tensor = np.empty((g, g, g))
            for j2 in range(g):
                tensor[:, j2, :] = c[:, j2, :] @ d2[j2, :, :].T
            idx = np.indices((g, g, g))
            mask3 = (idx[0] <= idx[1]) & (idx[1] <= idx[2])
            self._tensors[3] = tensor * mask3

    def nodes(self, k: int) -> np.ndarray:
        return self._nodes[k]

    def tensor(self, k: int) -> np.ndarray:
        """Kernel values on the order-k node grid (zero off the simplex)."""
        return self._tensors[k]

    def is_constant(self, k: int) -> bool:
        """True when the on-simplex kernel values are numerically constant."""
        vals = self._on_simplex(k)
        scale = np.max(np.abs(vals))
        return scale == 0.0 or np.ptp(vals) <= _CONST_RTOL * scale

    def constant_value(self, k: int) -> float:
        vals = self._on_simplex(k)
        return float(vals.mean())

    def _on_simplex(self, k: int) -> np.ndarray:
        tk = self._tensors[k]
        g = tk.shape[0]
        if k == 1:
            return tk
        if k == 2:
            return tk[np.triu_indices(g, k=0)]
        idx = np.indices(tk.shape)
        return tk[(idx[0] <= idx[1]) & (idx[1] <= idx[2])]

    def interpolator(self, k: int):
        """Callable a_k(tau_1, ..., tau_k) interpolating the cached tensor
        multilinearly (used by quadrature and the Fourier-Wiener pairing)."""
        from scipy.interpolate import RegularGridInterpolator

        nodes = self._nodes[k]
        rgi = RegularGridInterpolator([nodes] * k, self._tensors[k],
                                      bounds_error=False, fill_value=None)

        def ev(*times):
            pts = np.stack([np.asarray(x, float) for x in np.broadcast_arrays(*times)],
                           axis=-1)
            return rgi(pts)

        return ev

    def simplex_l2(self, k: int, points: int | None = None) -> float:
        """int_{Delta_k} a_k^2, by quadrature of the interpolated tensor."""
        ev = self.interpolator(k)

        def sq(*times):
            v = ev(*times)
            return v * v

        return simplex_integral(sq, k, self.t, points=points)


@dataclass
class SeriesResult:
    """Per-path truncated series: term values by chaos order."""

    terms: np.ndarray  # (R, K+1); terms[:, 0] is the deterministic level

    @property
    def order(self) -> int:
        return self.terms.shape[1] - 1

    def partial_sum(self, k: int | None = None) -> np.ndarray:
        k = self.order if k is None else k
        return self.terms[:, :k + 1].sum(axis=1)


def _series_terms_from_cache(cache: PipelineKernelCache, incs: np.ndarray,
                             dt: float, order: int) -> np.ndarray:
    """Evaluate per-path chaos terms against fine increments (R, steps)."""
    R, steps = incs.shape
    terms = np.empty((R, order + 1))
    terms[:, 0] = cache.value0
    fine_left = np.arange(steps) * dt
    for k in range(1, order + 1):
        if cache.is_constant(k):
            c = cache.constant_value(k)
            terms[:, k] = c * prefix_simplex_sum([incs] * k)
            continue
        if k == 1:
            vals = np.interp(fine_left, cache.nodes(1), cache.tensor(1))
            terms[:, k] = incs @ vals
            continue
        nodes = cache.nodes(k)
        g = len(nodes)
        edges = np.round(nodes / dt).astype(int)
        if edges[-1] > steps:
            raise ValueError("cache horizon exceeds the increment horizon")
        cells = aggregate_increments(incs, edges)  # (R, g-1) left cells
        tensor = cache.tensor(k)
        sub = tensor[(slice(0, g - 1),) * k]
        terms[:, k] = _backend.simplex_sum(sub, [cells] * k)
    return terms


# ---------------------------------------------------------------------------
# flat / OU case (Theorem 1.1 form) and the stopped-Wiener case
# ---------------------------------------------------------------------------

def theorem11_series(spec: ExpansionSpec, f: GridFunction,
                     bundle: WienerBundle, component: int = 1,
                     cache: PipelineKernelCache | None = None) -> float:
    """Truncated series value for one driving path.

    The zeroth term is T_t f(u); order-k terms integrate the cached
    pipeline kernel against the path over the simplex.
    """
    if spec.semigroup.kind not in ("heat", "ou"):
        raise ValueError("theorem11_series expects the heat or ou semigroup")
    res = theorem11_series_batch(
        spec, f, bundle.increments()[component - 1][None, :], bundle.dt,
        cache=cache)
    return float(res.partial_sum()[0])


def theorem11_series_batch(spec: ExpansionSpec, f: GridFunction,
                           incs: np.ndarray, dt: float,
                           cache: PipelineKernelCache | None = None,
                           points: dict[int, int] | None = None
                           ) -> SeriesResult:
    if cache is None:
        cache = PipelineKernelCache(spec.semigroup, spec.b, f, spec.t, spec.u,
                                    spec.order, points=points)
    _resolve_steps(spec.t, dt, what="t")
    return SeriesResult(_series_terms_from_cache(cache, incs, dt, spec.order))


def stopped_wiener_series(f: GridFunction, u: float, t: float, order: int,
                          bundle: WienerBundle, component: int = 1,
                          cache: PipelineKernelCache | None = None) -> float:
    """Truncated absorbed-semigroup series for one driving path."""
    if u < 0:
        raise ValueError("the stopped series needs u >= 0")
    res = stopped_wiener_series_batch(
        f, u, t, order, bundle.increments()[component - 1][None, :], bundle.dt,
        cache=cache)
    return float(res.partial_sum()[0])


def stopped_wiener_series_batch(f: GridFunction, u: float, t: float,
                                order: int, incs: np.ndarray, dt: float,
                                cache: PipelineKernelCache | None = None,
                                points: dict[int, int] | None = None
                                ) -> SeriesResult:
    if u < 0:
        raise ValueError("the stopped series needs u >= 0")
    if cache is None:
        cache = PipelineKernelCache(SemigroupSpec("absorbed"), 1.0, f, t, u,
                                    order, points=points)
    _resolve_steps(t, dt, what="t")
    return SeriesResult(_series_terms_from_cache(cache, incs, dt, order))


# ---------------------------------------------------------------------------
# matrix Lie-group case
# ---------------------------------------------------------------------------

def lie_series(z: np.ndarray, t: float, order: int, bundle: WienerBundle,
               component: int = 1) -> np.ndarray:
    """I + sum_{k<=K} Z^k I_k(t) with I_k the iterated integral of the
    constant kernel over the simplex (exact prefix scheme on the path).

    For the Ito reading of dG = G Z dw the expectation semigroup is the
    identity, so powers of Z carry the whole operator content.
    """
    z = np.asarray(z, float)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise ValueError("Z must be a square matrix")
    if order < 0:
        raise ValueError("order must be >= 0")
    steps_t = _resolve_steps(t, bundle.dt, what="t")
    dw = bundle.increments()[component - 1, :steps_t]
    out = np.eye(z.shape[0])
    zk = np.eye(z.shape[0])
    for k in range(1, order + 1):
        zk = zk @ z
        if not zk.any():
            break
        ik = float(prefix_simplex_sum([dw] * k))
        out = out + zk * ik
    return out


def extract_driver(g_path: np.ndarray, stride: int,
                   dt: float, det_eps: float = 1e-12
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Recover the driving matrix path M from a multiplicative path G.

    g_path: (steps+1, d, d) with G[0] = I.  Returns (times, m_path) where
    m_path[j] = sum_{k<j} (G_{k Delta}^{-1} G_{(k+1) Delta} - I) over the
    coarse grid Delta = stride * dt.
    """
    g_path = np.asarray(g_path, float)
    if g_path.ndim != 3 or g_path.shape[1] != g_path.shape[2]:
        raise ValueError("g_path must be (steps+1, d, d)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    coarse = g_path[::stride]
    dets = np.linalg.det(coarse)
    if np.any(np.abs(dets) < det_eps):
        raise ValueError("G is numerically singular along the path")
    n_coarse = coarse.shape[0] - 1
    d = coarse.shape[1]
    m_path = np.empty((n_coarse + 1, d, d))
    m_path[0] = 0.0
    acc = np.zeros((d, d))
    eye = np.eye(d)
    for k in range(n_coarse):
        acc = acc + (np.linalg.solve(coarse[k], coarse[k + 1]) - eye)
        m_path[k + 1] = acc
    times = np.arange(n_coarse + 1) * (stride * dt)
    return times, m_path


def euler_multiplicative_path(z: np.ndarray, bundle: WienerBundle,
                              t: float, component: int = 1) -> np.ndarray:
    """Euler-Maruyama path of dG = G Z dw on the bundle grid:
    G_{j+1} = G_j (I + Z dw_j).  Returns (steps+1, d, d)."""
    z = np.asarray(z, float)
    steps_t = _resolve_steps(t, bundle.dt, what="t")
    dw = bundle.increments()[component - 1, :steps_t]
    d = z.shape[0]
    out = np.empty((steps_t + 1, d, d))
    g = np.eye(d)
    out[0] = g
    eye = np.eye(d)
    for j in range(steps_t):
        g = g @ (eye + z * dw[j])
        out[j + 1] = g
    return out


# ---------------------------------------------------------------------------
# scenario semigroups and the n-point expansion (orders 0 and 1)
# ---------------------------------------------------------------------------

@dataclass
class ScenarioSemigroupEstimate:
    """Monte Carlo estimate of T_t^chain f(u)."""

    chain: PartitionChain
    value: float
    std_error: float
    reps: int


def _chain_code(key: tuple[int, ...], n: int) -> int:
    code = 0
    for b in key:
        code = code * n + (b + 1)
    return code


def _start_partition(starts: np.ndarray) -> IntervalPartition:
    n = len(starts)
    mask = 0
    for j in range(n - 1):
        if starts[j + 1] - starts[j] > 0:
            mask |= 1 << j
    return IntervalPartition.from_boundary_mask(mask, n)


def scenario_semigroup(chain: PartitionChain, f, starts, t: float, reps: int,
                       seed: int, rule: LambdaRule | None = None,
                       dt: float = 1e-3,
                       batch=None) -> ScenarioSemigroupEstimate:
    """Estimate T_t^chain f = E[f(x(t)) 1{merge history == chain by t}].

    f maps an (R, n) position array to (R,) values.  A pre-simulated
    FlowBatch can be passed to share one sample across chains.
    """
    from .partitions import LeaderRule

    starts = np.asarray(starts, float)
    if not chain.is_strict:
        raise ValueError("scenario chains must be strictly decreasing")
    kappa = _start_partition(starts)
    if chain.partitions[0].lengths != kappa.lengths:
        raise ValueError(
            f"chain starts at {chain.partitions[0]}, but the starts imply {kappa}")
    if batch is None:
        rule = rule or LeaderRule()
        batch = simulate_lambda_batch(starts, rule, reps, t, dt, seed)
    n = len(starts)
    codes = _scenario_codes(batch, t, n)
    target = _chain_code(chain_key(chain), n)
    ind = codes == target
    vals = np.asarray(f(batch.finals), float) * ind
    value = vals.sum() / batch.reps
    se = vals.std(ddof=1) / math.sqrt(batch.reps)
    return ScenarioSemigroupEstimate(chain=chain, value=float(value),
                                     std_error=float(se), reps=batch.reps)


def _scenario_codes(batch, t: float, n: int) -> np.ndarray:
    """Vectorized per-replica merge-history codes up to time t."""
    width = batch.ev_boundary.shape[1]
    codes = np.zeros(batch.reps, dtype=np.int64)
    for slot in range(width):
        live = (batch.ev_count > slot) & (batch.ev_time[:, slot] <= t)
        codes = np.where(live, codes * n + batch.ev_boundary[:, slot] + 1, codes)
    return codes


def theorem31_series(f, starts, rule: LambdaRule, t: float, order: int,
                     bundle: WienerBundle | None = None, reps: int = 100_000,
                     seed: int = 0, dt: float = 1e-3,
                     s_points: int = 11, v_points: int = 9,
                     inner_reps: int = 20_000, inner_dt: float = 1e-2,
                     chunk: int = DEFAULT_CHUNK) -> float:
    """Truncated n-point expansion evaluated at a driving bundle.

    Order 0 is the sum of scenario-semigroup estimates over all strictly
    decreasing chains (one shared sample, so it equals the plain Monte
    Carlo mean of f exactly).  Order 1 adds, for every driver i, the
    integral of the aggregated first-chaos kernel against dw_i on the
    bundle.  Orders >= 2 are refused: the kernels can be built with
    theorem31_kernel, but their integration is not verified.
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    if order >= 2:
        raise OrderNotVerifiedError(
            "theorem31_series integrates orders 0 and 1 only; order >= 2 "
            "kernels are constructible via theorem31_kernel but their "
            "integration is not verified")
    if order < 0:
        raise ValueError("order must be 0 or 1")
    if not validate_lambda(rule, n):
        raise ValueError("lambda rule violates the unit-norm constraint")
    total, _ = theorem31_order0(f, starts, rule, t, reps, seed, dt,
                                chunk=chunk)
    if order == 0:
        return total
    if bundle is None:
        raise ValueError("order 1 needs a driving bundle")
    if bundle.m < n:
        raise ValueError(f"bundle has m={bundle.m} < n={n} components")
    s_grid, kernels = theorem31_order1_kernels(
        f, starts, rule, t, seed=seed + 1, s_points=s_points,
        v_points=v_points, inner_reps=inner_reps, outer_reps=reps, dt=dt,
        inner_dt=inner_dt, chunk=chunk)
    steps_t = _resolve_steps(t, bundle.dt, what="t")
    fine_left = np.arange(steps_t) * bundle.dt
    incs = bundle.increments()
    for i in range(1, n + 1):
        gvals = np.interp(fine_left, s_grid, kernels[i - 1])
        total += float(gvals @ incs[i - 1, :steps_t])
    return total


def theorem31_order0(f, starts, rule: LambdaRule, t: float, reps: int,
                     seed: int, dt: float = 1e-3, chunk: int = DEFAULT_CHUNK
                     ) -> tuple[float, list[ScenarioSemigroupEstimate]]:
    """Order-0 sum and the per-chain estimates on one shared sample."""
    starts = np.asarray(starts, float)
    n = len(starts)
    batch = simulate_lambda_batch(starts, rule, reps, t, dt, seed,
                                  chunk=chunk)
    kappa = _start_partition(starts)
    chains = enumerate_chains(n, "Rbreve", start=kappa)
    estimates = [scenario_semigroup(c, f, starts, t, reps, seed, batch=batch)
                 for c in chains]
    total = float(sum(e.value for e in estimates))
    return total, estimates


def _lambda_snapshot_run(starts_rows: np.ndarray, rule: LambdaRule,
                         snapshot_steps: np.ndarray, dt: float,
                         incs: np.ndarray, logu: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Run one replica block through consecutive segments, recording
    positions and merge-history codes at each snapshot step."""
    from .flow import _sort_events

    R, total_steps, n = incs.shape
    weights = _weights_table_cached(rule, n)
    x = np.ascontiguousarray(starts_rows, float).copy()
    mask = np.empty(R, np.int64)
    for r in range(R):
        mask[r] = _start_mask(starts_rows[r])
    codes = np.zeros(R, np.int64)
    S = len(snapshot_steps)
    pos = np.empty((R, S, n))
    code_out = np.empty((R, S), np.int64)
    prev = 0
    for si, step in enumerate(snapshot_steps):
        if step > prev:
            seg_incs = np.ascontiguousarray(incs[:, prev:step, :])
            seg_logu = np.ascontiguousarray(logu[:, prev:step, :])
            x, mask, evc, evb, evt, _ = _backend.lambda_flow_steps(
                x, mask, weights, seg_incs, seg_logu, dt, True)
            evb, evt = _sort_events(evc, evb, evt)
            for slot in range(evb.shape[1]):
                live = evc > slot
                codes = np.where(live, codes * n + evb[:, slot] + 1, codes)
            prev = step
        pos[:, si, :] = x
        code_out[:, si] = codes
    return pos, code_out


_WTAB_CACHE: dict = {}


def _weights_table_cached(rule: LambdaRule, n: int) -> np.ndarray:
    from .flow import _weights_table

    key = (id(rule), rule.name(), n)
    tab = _WTAB_CACHE.get(key)
    if tab is None:
        tab = _weights_table(rule, n)
        _WTAB_CACHE[key] = tab
    return tab


def _start_mask(starts) -> int:
    mask = 0
    for j in range(len(starts) - 1):
        if starts[j + 1] - starts[j] > 0:
            mask |= 1 << j
    return mask


def theorem31_order1_kernels(f, starts, rule: LambdaRule, t: float,
                             seed: int, s_points: int = 11,
                             v_points: int = 9, inner_reps: int = 20_000,
                             outer_reps: int = 100_000, dt: float = 1e-3,
                             inner_dt: float = 1e-2,
                             chunk: int = DEFAULT_CHUNK
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated first-chaos kernels g_i(s) of f(x(t)) for each driver.

    Returns (s_grid, kernels) with kernels[i-1, j] =
    sum_{chains in R_1} lambda_{pi_1, i} [T^p1_s d_i T^p2_{t-s} f](u)
    at s = s_grid[j].  Scenario semigroups are estimated by common-random-
    number Monte Carlo on a block-coordinate start grid (finite
    differences give the block derivatives); the inner runs may use a
    coarser step inner_dt since only weak accuracy matters there.
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    steps_t = _resolve_steps(t, dt, what="t")
    if (steps_t % (s_points - 1)) != 0:
        raise ValueError(
            f"s_points-1={s_points - 1} must divide the step count {steps_t}")
    inner_steps = _resolve_steps(t, inner_dt, what="t")
    if (inner_steps % (s_points - 1)) != 0:
        raise ValueError(
            f"s_points-1={s_points - 1} must divide the inner step count "
            f"{inner_steps}")
    snap = np.arange(s_points) * (steps_t // (s_points - 1))
    s_grid = snap * dt
    kappa = _start_partition(starts)
    chains = list(enumerate_chains(n, "Rk", k=1, start=kappa))

    # one outer run from the true starts, snapshotted over s_grid
    outer_pos, outer_codes = _snapshot_batch(
        np.repeat(starts[None, :], outer_reps, axis=0), rule, snap, dt,
        seed, chunk)

    kernels = np.zeros((n, s_points))
    inner_cache: dict = {}
    for chain in chains:
        piece1, piece2 = chain.strict_pieces()
        pi1 = chain.stationary_partitions()[0]
        lam = rule.vector(pi1)
        code1 = _chain_code(chain_key(piece1), n)
        cache_id = (chain_key(piece2), pi1.lengths)
        if cache_id not in inner_cache:
            inner_cache[cache_id] = _inner_estimates(
                f, starts, rule, pi1, piece2, t, s_points, inner_dt,
                seed + 17, v_points, inner_reps)
        vaxes, h_tables = inner_cache[cache_id]
        for blk_idx, b in enumerate(pi1.blocks):
            lam_block = [lam[q] for q in b.indices()]
            if all(abs(x) < 1e-15 for x in lam_block):
                continue
            # derivative of the reduced inner function along this block axis
            dh = [np.gradient(h_tables[si], vaxes[blk_idx].h, axis=blk_idx,
                              edge_order=2) for si in range(s_points)]
            contrib = _outer_contract(outer_pos, outer_codes, code1, pi1,
                                      vaxes, dh)
            for i0 in b.indices():
                if abs(lam[i0]) < 1e-15:
                    continue
                kernels[i0] += lam[i0] * contrib
    return s_grid, kernels


def _snapshot_batch(start_rows: np.ndarray, rule: LambdaRule,
                    snap: np.ndarray, dt: float, seed: int, chunk: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Chunked snapshot runs; start_rows (R, n) may vary per row."""
    R, n = start_rows.shape
    total_steps = int(snap[-1])
    S = len(snap)
    pos = np.empty((R, S, n))
    codes = np.empty((R, S), np.int64)
    logu_iter = log_uniform_chunks(R, total_steps, max(n - 1, 1), seed, chunk)
    for lo, incs in increment_chunks(R, total_steps, n, dt, seed, chunk):
        rows = incs.shape[0]
        logu = next(logu_iter)[1][:, :, :n - 1]
        p, c = _lambda_snapshot_run(start_rows[lo:lo + rows], rule, snap, dt,
                                    incs, logu)
        pos[lo:lo + rows] = p
        codes[lo:lo + rows] = c
    return pos, codes


def _inner_estimates(f, starts, rule: LambdaRule, pi1: IntervalPartition,
                     piece2: PartitionChain, t: float, s_points: int,
                     inner_dt: float, seed: int, v_points: int,
                     inner_reps: int):
    """Estimate h_s(v) = T^{piece2}_{t-s} f(v) on a block-coordinate grid.

    Returns (vaxes, tables): vaxes is one GridAxis per block of pi1;
    tables[si] is the estimate array over the block grid for s_grid[si]
    (horizon t - s).  One shared noise sample serves every grid point
    (common random numbers keep finite differences quiet).
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    num_blocks = pi1.num_blocks
    spread = 4.5 * math.sqrt(t)
    vaxes = []
    for b in pi1.blocks:
        center = starts[b.lo - 1]
        vaxes.append(GridAxis(center - spread, center + spread, v_points))
    total_steps = _resolve_steps(t, inner_dt, what="t")
    # snapshots at the horizons t - s, ascending in steps
    stride = total_steps // (s_points - 1)
    inner_snap = np.arange(s_points) * stride
    S = s_points
    n_grid = v_points ** num_blocks
    code2 = _chain_code(chain_key(piece2), n)

    # shared noise across all start points (common random numbers)
    incs_chunks = [c for _, c in
                   increment_chunks(inner_reps, total_steps, n, inner_dt, seed)]
    logu_chunks = [lu[:, :, :n - 1] for _, lu in
                   log_uniform_chunks(inner_reps, total_steps, max(n - 1, 1),
                                      seed + 1)]

    mesh = np.meshgrid(*(ax.nodes() for ax in vaxes), indexing="ij")
    vpoints_flat = np.stack([m.ravel() for m in mesh], axis=-1)  # (n_grid, B)
    tables = [np.zeros((v_points,) * num_blocks) for _ in range(S)]
    for gi in range(n_grid):
        # blocks get sorted coordinates: evaluating unordered tuples at
        # their sorted rearrangement extends h continuously across the
        # diagonal, where the scenario density vanishes anyway
        start_vec = _embed_sorted(vpoints_flat[gi], pi1)
        acc = np.zeros(S)
        count = 0
        for incs, logu in zip(incs_chunks, logu_chunks):
            rows = incs.shape[0]
            rows_starts = np.repeat(start_vec[None, :], rows, axis=0)
            p, c = _lambda_snapshot_run(rows_starts, rule, inner_snap,
                                        inner_dt, incs, logu)
            fv = np.asarray(f(p.reshape(rows * S, n)), float).reshape(rows, S)
            acc += (fv * (c == code2)).sum(axis=0)
            count += rows
        est = acc / count
        idx = np.unravel_index(gi, (v_points,) * num_blocks)
        for si in range(S):
            # table for s_grid[si] needs horizon t - s = step index
            # total_steps - si*stride, i.e. inner snapshot S-1-si
            tables[si][idx] = est[S - 1 - si]
    return vaxes, tables


def _embed_sorted(block_vals: np.ndarray, p: IntervalPartition) -> np.ndarray:
    """Particle positions from (possibly unordered) block coordinates;
    unordered tuples are evaluated at their sorted rearrangement, which
    extends the estimate continuously across the diagonal."""
    vals = np.sort(block_vals)
    out = np.empty(p.n)
    for k, b in enumerate(p.blocks):
        for i in b.indices():
            out[i] = vals[k]
    return out


def _outer_contract(outer_pos: np.ndarray, outer_codes: np.ndarray,
                    code1: int, pi1: IntervalPartition, vaxes,
                    dh_tables) -> np.ndarray:
    """E[1{history == piece1 at s} dh(x(s))] for each snapshot index."""
    R, S, n = outer_pos.shape
    out = np.empty(S)
    block_cols = [b.lo - 1 for b in pi1.blocks]
    for si in range(S):
        ind = outer_codes[:, si] == code1
        if not ind.any():
            out[si] = 0.0
            continue
        coords = outer_pos[ind][:, si, block_cols]  # (Rsel, B)
        vals = _interp_table(dh_tables[si], vaxes, coords)
        out[si] = vals.sum() / R
    return out


def _interp_table(table: np.ndarray, vaxes, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation with edge clamping."""
    from scipy.interpolate import RegularGridInterpolator

    nodes = [ax.nodes() for ax in vaxes]
    rgi = RegularGridInterpolator(nodes, table, bounds_error=False,
                                  fill_value=None)
    clipped = np.column_stack([
        np.clip(coords[:, k], ax.lo, ax.hi) for k, ax in enumerate(vaxes)])
    return rgi(clipped)


def theorem31_kernel(f, starts, rule: LambdaRule, chain: PartitionChain,
                     drivers: tuple[int, ...], s_values: tuple[float, ...],
                     t: float, seed: int = 0, v_points: int = 9,
                     inner_reps: int = 4000, dt: float = 1e-2) -> float:
    """Structural kernel constructor for a chain in R_k (any k >= 1).

    Evaluates T^{p1}_{s1} d_{i1} T^{p2}_{s2-s1} ... d_{ik} T^{pk+1}_{t-sk} f
    at the configured starts by recursive Monte Carlo estimation; this
    exists so higher-order kernels are constructible, but series
    integration beyond order 1 is refused (OrderNotVerifiedError there).
    """
    starts = np.asarray(starts, float)
    n = len(starts)
    k = chain.stationary_count
    if k != len(drivers) or k != len(s_values):
        raise ValueError("need one driver and one time per stationary step")
    if k == 0:
        est = scenario_semigroup(chain, f, starts, t, inner_reps, seed,
                                 rule=rule, dt=dt)
        return est.value
    pieces = chain.strict_pieces()
    stat_parts = chain.stationary_partitions()
    pi1 = stat_parts[0]
    tail = _chain_from_pieces(pieces[1:], stat_parts[1:])

    def inner_fn(pos_rows):
        # evaluate the (k-1)-stage tail kernel at each row by recursion
        out = np.empty(pos_rows.shape[0])
        for r in range(pos_rows.shape[0]):
            out[r] = theorem31_kernel(
                f, np.sort(pos_rows[r]), rule, tail, drivers[1:],
                tuple(sv - s_values[0] for sv in s_values[1:]),
                t - s_values[0], seed=seed + 1, v_points=v_points,
                inner_reps=max(inner_reps // 4, 200), dt=dt)
        return out

    # estimate d_{i1} (inner) on a block grid, then T^{piece1}_{s1} of it
    b = None
    for blk in pi1.blocks:
        if drivers[0] in blk:
            b = blk
            break
    spread = 4.0 * math.sqrt(max(s_values[0], dt))
    axis_nodes = []
    for blk in pi1.blocks:
        c = starts[blk.lo - 1]
        axis_nodes.append(GridAxis(c - spread, c + spread, v_points))
    mesh = np.meshgrid(*(ax.nodes() for ax in axis_nodes), indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=-1)
    rows = np.stack([_embed_sorted(flat[g], pi1) for g in range(flat.shape[0])])
    table = inner_fn(rows).reshape((v_points,) * pi1.num_blocks)
    blk_axis = list(pi1.blocks).index(b)
    dtable = np.gradient(table, axis_nodes[blk_axis].h, axis=blk_axis,
                         edge_order=2)

    def reduced(pos_rows):
        coords = pos_rows[:, [blk.lo - 1 for blk in pi1.blocks]]
        return _interp_table(dtable, axis_nodes, coords)

    s1_steps = _resolve_steps(s_values[0], dt, what="s1") if s_values[0] > 0 else 0
    if s1_steps == 0:
        return float(reduced(starts[None, :])[0])
    est = scenario_semigroup(pieces[0], reduced, starts, s_values[0],
                             inner_reps, seed + 3, rule=rule, dt=dt)
    return est.value


def _chain_from_pieces(pieces, stat_parts) -> PartitionChain:
    """Reassemble a chain in R_{k-1} from tail pieces and repeats."""
    parts = list(pieces[0].partitions)
    for piece, stat in zip(pieces[1:], stat_parts):
        parts.append(stat)  # the repeated partition
        parts.extend(piece.partitions[1:])
    return PartitionChain(tuple(parts))
