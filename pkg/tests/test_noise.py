import math

import numpy as np
import pytest

from kvchaos.noise import (SimplexKernel, aggregate_increments,
                           coarse_cell_edges, fourier_wiener_pairing,
                           increment_chunks, iterated_integral,
                           log_uniform_chunks, prefix_simplex_sum,
                           sample_bundle, simplex_integral,
                           stochastic_exponent, write_bundle_csv)


class TestSampling:
    def test_determinism(self):
        a = sample_bundle(3, 1.0, 1e-3, seed=7)
        b = sample_bundle(3, 1.0, 1e-3, seed=7)
        assert np.array_equal(a.paths, b.paths)

    def test_seed_changes_paths(self):
        a = sample_bundle(1, 1.0, 1e-2, seed=7)
        b = sample_bundle(1, 1.0, 1e-2, seed=8)
        assert not np.array_equal(a.paths, b.paths)

    def test_starts_offset(self):
        b = sample_bundle(2, 0.5, 1e-2, seed=1, starts=[2.0, -1.0])
        assert b.paths[0, 0] == 2.0 and b.paths[1, 0] == -1.0

    def test_increment_moments_within_clt(self):
        # CLT bound oracle: mean within 4 sqrt(dt/N), covariance likewise
        b = sample_bundle(2, 100.0, 1e-3, seed=42)
        incs = b.increments()
        n = incs.shape[1]
        assert abs(incs[0].mean()) < 4 * math.sqrt(1e-3 / n)
        cross = (incs[0] * incs[1]).mean()
        assert abs(cross) < 4 * 1e-3 / math.sqrt(n)
        assert abs(incs[0].var() - 1e-3) < 4 * 1e-3 * math.sqrt(2.0 / n)

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            sample_bundle(1, 1.0, 0.0, seed=1)
        with pytest.raises(ValueError):
            sample_bundle(1, 1.0, 0.3, seed=1)

    def test_chunks_cover_reps(self):
        seen = 0
        for lo, incs in increment_chunks(10_000, 10, 2, 1e-2, 3, chunk=4096):
            assert lo == seen
            seen += incs.shape[0]
        assert seen == 10_000

    def test_chunk_determinism(self):
        a = np.concatenate([c for _, c in
                            increment_chunks(5000, 5, 1, 1e-2, 9)])
        b = np.concatenate([c for _, c in
                            increment_chunks(5000, 5, 1, 1e-2, 9)])
        assert np.array_equal(a, b)

    def test_log_uniform_range(self):
        _, lu = next(log_uniform_chunks(100, 10, 1, 5))
        assert (lu < 0).all()


class TestIteratedIntegral:
    def test_constant_k1_telescopes(self):
        b = sample_bundle(1, 1.0, 1e-3, seed=11)
        k = SimplexKernel(1, (1,), 2.5)
        val = iterated_integral(k, b, 1.0)
        assert val == pytest.approx(2.5 * (b.paths[0, -1] - b.paths[0, 0]),
                                    abs=1e-12)

    def test_zero_kernel(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=11)
        k = SimplexKernel(2, (1, 1), 0.0)
        assert iterated_integral(k, b, 1.0) == 0.0

    def test_k2_hermite_identity(self):
        # strict fine-grid sum has the closed form (w^2 - sum dw^2)/2;
        # distance to (w^2 - t)/2 is O(sqrt(dt)) in L2
        b = sample_bundle(1, 1.0, 1e-3, seed=13)
        k = SimplexKernel(2, (1, 1), 1.0)
        val = iterated_integral(k, b, 1.0)
        w = b.paths[0, -1]
        dw = np.diff(b.paths[0])
        assert val == pytest.approx((w * w - (dw * dw).sum()) / 2, abs=1e-12)
        assert abs(val - (w * w - 1.0) / 2) < 6 * math.sqrt(1e-3 / 2)

    def test_k2_mixed_components_vs_brute(self):
        b = sample_bundle(2, 0.1, 1e-3, seed=17)
        k = SimplexKernel(2, (1, 2), 1.0)
        val = iterated_integral(k, b, 0.1)
        dw, dv = np.diff(b.paths[0]), np.diff(b.paths[1])
        brute = sum(dv[j] * dw[:j].sum() for j in range(100))
        assert val == pytest.approx(brute, rel=1e-12)

    def test_general_kernel_vs_brute(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=23)
        k = SimplexKernel(2, (1, 1), lambda a, c: np.sin(a) + c)
        cells = 20
        val = iterated_integral(k, b, 1.0, cells=cells)
        edges = coarse_cell_edges(100, cells)
        dw = aggregate_increments(np.diff(b.paths[0]), edges)
        left = edges[:-1] * 1e-2
        brute = 0.0
        for bb in range(cells):
            for aa in range(bb):
                brute += (math.sin(left[aa]) + left[bb]) * dw[aa] * dw[bb]
        assert val == pytest.approx(brute, rel=1e-12)

    def test_k3_general_vs_brute(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=29)
        k = SimplexKernel(3, (1, 1, 1), lambda a, c, d: a + 2 * c + d * d)
        cells = 10
        val = iterated_integral(k, b, 1.0, cells=cells)
        edges = coarse_cell_edges(100, cells)
        dw = aggregate_increments(np.diff(b.paths[0]), edges)
        left = edges[:-1] * 1e-2
        brute = 0.0
        for cc in range(cells):
            for bb in range(cc):
                for aa in range(bb):
                    brute += ((left[aa] + 2 * left[bb] + left[cc] ** 2)
                              * dw[aa] * dw[bb] * dw[cc])
        assert val == pytest.approx(brute, rel=1e-11)

    def test_scalar_evaluator_is_wrapped(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=31)
        vec = SimplexKernel(2, (1, 1), lambda a, c: np.asarray(a) + c)
        scal = SimplexKernel(2, (1, 1), lambda a, c: float(a) + float(c))
        assert iterated_integral(vec, b, 1.0, cells=16) == pytest.approx(
            iterated_integral(scal, b, 1.0, cells=16), rel=1e-12)

    def test_separable_factors_prefix_route(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=37)
        k = SimplexKernel(2, (1, 1),
                          lambda a, c: np.exp(-a) * np.cos(c),
                          factors=[lambda s: np.exp(-s), np.cos])
        val = iterated_integral(k, b, 1.0)
        dw = np.diff(b.paths[0])
        left = np.arange(100) * 1e-2
        brute = sum(math.cos(left[j]) * dw[j]
                    * (np.exp(-left[:j]) * dw[:j]).sum() for j in range(100))
        assert val == pytest.approx(brute, rel=1e-12)

    def test_component_out_of_range(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=1)
        with pytest.raises(ValueError):
            iterated_integral(SimplexKernel(1, (2,), 1.0), b, 1.0)

    def test_ito_isometry(self):
        # empirical isometry for a deterministic k=1 kernel
        reps, steps, dt = 20_000, 200, 5e-3
        vals = np.empty(reps)
        a = np.cos(np.arange(steps) * dt)
        for lo, incs in increment_chunks(reps, steps, 1, dt, 101):
            vals[lo:lo + incs.shape[0]] = incs[:, :, 0] @ a
        target = float((a * a).sum() * dt)
        var = vals.var(ddof=1)
        m4 = np.mean((vals - vals.mean()) ** 4)
        se = math.sqrt(max(m4 - var ** 2, 0) / reps)
        assert abs(var - target) < 4 * se

    def test_chaos_orthogonality(self):
        reps, steps, dt = 20_000, 200, 5e-3
        prod = np.empty(reps)
        for lo, incs in increment_chunks(reps, steps, 1, dt, 103):
            inc = incs[:, :, 0]
            i1 = inc.sum(axis=1)
            i2 = prefix_simplex_sum([inc, inc])
            prod[lo:lo + inc.shape[0]] = i1 * i2
        se = prod.std(ddof=1) / math.sqrt(reps)
        assert abs(prod.mean()) < 4 * se


class TestStochasticExponent:
    def test_zero_phi(self):
        b = sample_bundle(1, 1.0, 1e-2, seed=3)
        assert stochastic_exponent(0.0, b, 1.0) == 1.0

    def test_constant_phi_closed_form(self):
        b = sample_bundle(1, 1.0, 1e-3, seed=3)
        val = stochastic_exponent(1.0, b, 1.0)
        assert val == pytest.approx(math.exp(b.paths[0, -1] - 0.5), rel=1e-12)

    def test_martingale_mean(self):
        reps, steps, dt = 20_000, 100, 1e-2
        vals = np.empty(reps)
        ph = np.full(steps, 0.7)
        for lo, incs in increment_chunks(reps, steps, 1, dt, 7):
            inc = incs[:, :, 0]
            vals[lo:lo + inc.shape[0]] = np.exp(
                inc @ ph - 0.5 * (ph @ ph) * dt)
        se = vals.std(ddof=1) / math.sqrt(reps)
        assert abs(vals.mean() - 1.0) < 4 * se


class TestPairing:
    def test_constant_term_only(self):
        assert fourier_wiener_pairing(3.5, [], 1.0, 1.0) == 3.5

    def test_order1_volume(self):
        k = SimplexKernel(1, (1,), 1.0)
        assert fourier_wiener_pairing(0.0, [k], 1.0, 1.0) == pytest.approx(1.0)

    def test_order2_simplex_volume_vs_brute(self):
        # brute-force grid sum oracle for the Delta_2 volume t^2/2
        k = SimplexKernel(2, (1, 1), 1.0)
        val = fourier_wiener_pairing(0.0, [k], 1.0, 1.0)
        g = 400
        h = 1.0 / g
        brute = sum((j * h) * h for j in range(g + 1)) - 0.5 * h  # trapz of s
        assert val == pytest.approx(1.0 / 2.0, abs=1e-12)
        assert val == pytest.approx(brute, abs=1e-3)

    def test_order3_volume(self):
        # trapezoid leaves an O(h^2) residue on the quadratic last stage
        k = SimplexKernel(3, (1, 1, 1), 1.0)
        assert fourier_wiener_pairing(0.0, [k], 1.0, 2.0) == pytest.approx(
            2.0 ** 3 / 6.0, rel=1e-4)

    def test_varying_kernel_vs_brute(self):
        val = simplex_integral(lambda a, c: a * c, 2, 1.0, points=257)
        # int_0^1 int_0^c a c da dc = int c^3/2 = 1/8
        assert val == pytest.approx(1.0 / 8.0, rel=1e-4)

    def test_order_cap(self):
        k = SimplexKernel(5, (1,) * 5, 1.0)
        with pytest.raises(ValueError):
            fourier_wiener_pairing(0.0, [k], 1.0, 1.0)

    def test_pairing_consistency_monte_carlo(self):
        # assemble alpha from known kernels; E[alpha E(phi)] must match
        # the analytic pairing within CLT tolerance
        reps, steps, dt, t = 40_000, 100, 1e-2, 1.0
        a0, c1, c2 = 0.3, 1.2, 0.8
        phi = 0.5
        vals = np.empty(reps)
        ph = np.full(steps, phi)
        for lo, incs in increment_chunks(reps, steps, 1, dt, 211):
            inc = incs[:, :, 0]
            alpha = (a0 + c1 * inc.sum(axis=1)
                     + c2 * prefix_simplex_sum([inc, inc]))
            vals[lo:lo + inc.shape[0]] = alpha * np.exp(
                inc @ ph - 0.5 * (ph @ ph) * dt)
        kernels = [SimplexKernel(1, (1,), c1), SimplexKernel(2, (1, 1), c2)]
        pair = fourier_wiener_pairing(a0, kernels, phi, t)
        assert pair == pytest.approx(a0 + c1 * phi * t
                                     + c2 * phi ** 2 * t ** 2 / 2, rel=1e-9)
        se = vals.std(ddof=1) / math.sqrt(reps)
        assert abs(vals.mean() - pair) < 4 * se


def test_bundle_csv(tmp_path):
    b = sample_bundle(2, 0.05, 1e-2, seed=5)
    path = tmp_path / "bundle.csv"
    write_bundle_csv(b, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "step,t,w1,w2"
    assert len(lines) == b.steps + 2
