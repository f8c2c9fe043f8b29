import numpy as np
import pytest

from kvchaos.partitions import IntervalPartition
from kvchaos.semigroup import (Grid, GridAxis, GridFunction, SemigroupSpec,
                               absorption_mass, apply_semigroup,
                               block_derivative, derivative, kernel_pipeline,
                               read_grid_function_csv, semigroup_matrix,
                               write_grid_function_csv)

HEAT = SemigroupSpec("heat")
OU = SemigroupSpec("ou", theta=0.8)
ABS = SemigroupSpec("absorbed")


def gf(lo, hi, points, fn):
    return GridFunction.from_callable(Grid.regular(lo, hi, points), fn)


def interior(f, margin):
    nodes = f.grid.axes[0].nodes()
    return (nodes >= nodes[0] + margin) & (nodes <= nodes[-1] - margin)


class TestHeat:
    def test_second_moment(self):
        # Gaussian second-moment oracle: T_t v^2 = u^2 + t
        f = gf(-8, 8, 1601, lambda v: v * v)
        t = 0.7
        out = apply_semigroup(HEAT, f, t)
        nodes = f.grid.axes[0].nodes()
        sel = np.abs(nodes) <= 1.5
        assert np.abs(out.values[sel] - (nodes[sel] ** 2 + t)).max() < 1e-10

    def test_identity_at_zero_time(self):
        f = gf(-5, 5, 301, np.sin)
        assert apply_semigroup(HEAT, f, 0.0) is f

    def test_negative_time_rejected(self):
        f = gf(-5, 5, 301, np.sin)
        with pytest.raises(ValueError):
            apply_semigroup(HEAT, f, -0.1)

    def test_semigroup_property(self):
        f = gf(-10, 10, 1001, lambda v: np.exp(-v * v))
        one_shot = apply_semigroup(HEAT, f, 0.5)
        two_shot = apply_semigroup(HEAT, apply_semigroup(HEAT, f, 0.2), 0.3)
        sel = interior(f, 4.0)
        assert np.abs(one_shot.values[sel] - two_shot.values[sel]).max() < 1e-8

    def test_derivative_commutation(self):
        f = gf(-10, 10, 2001, lambda v: np.sin(v) * np.exp(-0.1 * v * v))
        t = 0.4
        a = derivative(apply_semigroup(HEAT, f, t))
        b = apply_semigroup(HEAT, derivative(f), t)
        sel = interior(f, 4.0)
        assert np.abs(a.values[sel] - b.values[sel]).max() < 1e-6

    def test_contraction(self):
        f = gf(-8, 8, 801, lambda v: np.cos(3 * v))
        out = apply_semigroup(HEAT, f, 0.6)
        assert out.sup_norm <= f.sup_norm + 1e-12


class TestOU:
    def test_mean_decay(self):
        # analytic oracle: OU mean e^{-theta t} u
        f = gf(-12, 12, 2401, lambda v: v)
        t = 0.9
        out = apply_semigroup(OU, f, t)
        nodes = f.grid.axes[0].nodes()
        sel = np.abs(nodes) <= 2
        expected = np.exp(-OU.theta * t) * nodes[sel]
        assert np.abs(out.values[sel] - expected).max() < 1e-8

    def test_second_moment(self):
        # analytic oracle: Var = (1 - e^{-2 theta t}) / (2 theta)
        f = gf(-12, 12, 2401, lambda v: v * v)
        t = 0.9
        out = apply_semigroup(OU, f, t)
        nodes = f.grid.axes[0].nodes()
        sel = np.abs(nodes) <= 2
        var = (1 - np.exp(-2 * OU.theta * t)) / (2 * OU.theta)
        expected = (np.exp(-OU.theta * t) * nodes[sel]) ** 2 + var
        assert np.abs(out.values[sel] - expected).max() < 1e-8

    def test_semigroup_property(self):
        f = gf(-10, 10, 1001, lambda v: np.tanh(v))
        one = apply_semigroup(OU, f, 0.7)
        two = apply_semigroup(OU, apply_semigroup(OU, f, 0.3), 0.4)
        sel = interior(f, 4.0)
        assert np.abs(one.values[sel] - two.values[sel]).max() < 1e-7

    def test_theta_validation(self):
        with pytest.raises(ValueError):
            SemigroupSpec("ou")
        with pytest.raises(ValueError):
            SemigroupSpec("heat", theta=1.0)


class TestAbsorbed:
    def test_total_probability(self):
        f = gf(0, 9, 1801, lambda v: np.ones_like(v))
        for t in (0.5, 1.0):
            out = apply_semigroup(ABS, f, t)
            nodes = f.grid.axes[0].nodes()
            sel = nodes <= 2.5
            assert np.abs(out.values[sel] - 1.0).max() < 1e-5

    def test_martingale_identity(self):
        f = gf(0, 9, 1801, lambda v: v)
        for t in (0.5, 1.0):
            out = apply_semigroup(ABS, f, t)
            nodes = f.grid.axes[0].nodes()
            sel = nodes <= 2.5
            assert np.abs(out.values[sel] - nodes[sel]).max() < 1e-6

    def test_requires_zero_origin(self):
        f = gf(0.5, 9, 301, lambda v: v)
        with pytest.raises(ValueError):
            apply_semigroup(ABS, f, 0.5)

    def test_kernel_positivity(self):
        # image-method kernel stays nonnegative on the quadrant
        u = np.linspace(0, 5, 40)[:, None]
        v = np.linspace(0, 5, 41)[None, :]
        for t in (0.1, 1.0):
            k = (np.exp(-((v - u) ** 2) / (2 * t))
                 - np.exp(-((v + u) ** 2) / (2 * t)))
            assert (k >= -1e-15).all()

    def test_semigroup_property(self):
        f = gf(0, 12, 1201, lambda v: np.minimum(v, 2.0))
        one = apply_semigroup(ABS, f, 0.8)
        two = apply_semigroup(ABS, apply_semigroup(ABS, f, 0.5), 0.3)
        nodes = f.grid.axes[0].nodes()
        sel = nodes <= 4
        assert np.abs(one.values[sel] - two.values[sel]).max() < 1e-6

    def test_contraction(self):
        f = gf(0, 9, 901, lambda v: np.cos(2 * v))
        out = apply_semigroup(ABS, f, 0.7)
        assert out.sup_norm <= f.sup_norm + 1e-12

    def test_killed_variant_drops_mass(self):
        f = gf(0, 9, 901, lambda v: np.ones_like(v))
        t = 0.5
        killed = apply_semigroup(ABS, f, t, killed=True)
        nodes = f.grid.axes[0].nodes()
        sel = nodes <= 2.5
        survival = 1.0 - absorption_mass(nodes[sel], t)
        assert np.abs(killed.values[sel] - survival).max() < 1e-5

    def test_matrix_matches_apply(self):
        axis = GridAxis(0, 9, 901)
        f = gf(0, 9, 901, lambda v: np.minimum(v, 2.0))
        m = semigroup_matrix(ABS, axis, 0.4)
        direct = apply_semigroup(ABS, f, 0.4)
        assert np.abs(m @ f.values - direct.values).max() < 1e-12


class TestDerivatives:
    def test_exact_on_quadratics(self):
        f = gf(-3, 3, 61, lambda v: v * v)
        nodes = f.grid.axes[0].nodes()
        assert np.abs(derivative(f).values - 2 * nodes).max() < 1e-10

    def test_constant_maps_to_zero(self):
        f = gf(-3, 3, 61, lambda v: np.full_like(v, 4.2))
        assert np.abs(derivative(f).values).max() < 1e-12

    def test_sin_second_order(self):
        errs = []
        for pts in (101, 201):
            f = gf(-3, 3, pts, np.sin)
            nodes = f.grid.axes[0].nodes()
            errs.append(np.abs(derivative(f).values - np.cos(nodes)).max())
        # halving h divides the error by about 4
        assert errs[1] < errs[0] / 3

    def test_block_derivative_merged_pair(self):
        grid = Grid.regular(-2, 2, 41, dim=2)
        f = GridFunction.from_callable(grid, lambda a, b: a)
        out = block_derivative(f, IntervalPartition((2,)), 1)
        assert np.abs(out.values - 1.0).max() < 1e-10

    def test_block_derivative_singleton(self):
        grid = Grid.regular(-2, 2, 41, dim=2)
        f = GridFunction.from_callable(grid, lambda a, b: a * b)
        out = block_derivative(f, IntervalPartition((1, 1)), 2)
        mesh_a = np.meshgrid(*(ax.nodes() for ax in grid.axes),
                             indexing="ij")[0]
        assert np.abs(out.values - mesh_a).max() < 1e-10

    def test_block_derivative_three_particles(self):
        grid = Grid.regular(-2, 2, 21, dim=3)
        f = GridFunction.from_callable(grid, lambda a, b, c: a + b + c)
        out = block_derivative(f, IntervalPartition((2, 1)), 1)
        assert np.abs(out.values - 2.0).max() < 1e-10

    def test_dimension_mismatch(self):
        f = gf(-2, 2, 41, lambda v: v)
        with pytest.raises(ValueError):
            block_derivative(f, IntervalPartition((1, 1)), 1)


class TestPipeline:
    def test_heat_commutes_with_derivative(self):
        # symbolic commutation oracle: T_r d T_{t-r} v^2 = d T_t v^2 = 2v
        f = gf(-9, 9, 1801, lambda v: v * v)
        t = 1.0
        for r in (0.0, 0.3, 1.0):
            out = kernel_pipeline(HEAT, 1.0, f, t, [r])
            nodes = f.grid.axes[0].nodes()
            sel = np.abs(nodes) <= 1.5
            assert np.abs(out.values[sel] - 2 * nodes[sel]).max() < 1e-6

    def test_empty_times_is_plain_semigroup(self):
        f = gf(-6, 6, 601, np.sin)
        a = kernel_pipeline(HEAT, 1.0, f, 0.5, [])
        b = apply_semigroup(HEAT, f, 0.5)
        assert np.array_equal(a.values, b.values)

    def test_absorbed_constant_killed(self):
        # window truncation pollutes the last few sigmas; check interior
        f = gf(0, 8, 801, lambda v: np.full_like(v, 3.0))
        out = kernel_pipeline(ABS, 1.0, f, 1.0, [0.4])
        sel = f.grid.axes[0].nodes() <= 2.0
        assert np.abs(out.values[sel]).max() < 1e-5

    def test_unsorted_times_rejected(self):
        f = gf(-6, 6, 601, np.sin)
        with pytest.raises(ValueError):
            kernel_pipeline(HEAT, 1.0, f, 1.0, [0.7, 0.2])

    def test_variable_coefficient(self):
        # A = b d/dv with b = v on a linear function: T_r (v * 1)
        f = gf(-9, 9, 1801, lambda v: v)
        b = gf(-9, 9, 1801, lambda v: v)
        out = kernel_pipeline(HEAT, b, f, 0.5, [0.5])
        nodes = f.grid.axes[0].nodes()
        sel = np.abs(nodes) <= 1.5
        # innermost T_0 f = v, A f = v, then T_{0.5} v = v
        assert np.abs(out.values[sel] - nodes[sel]).max() < 1e-6


class TestCsv:
    def test_roundtrip_1d(self, tmp_path):
        f = gf(-1, 1, 11, lambda v: v ** 3)
        path = tmp_path / "f.csv"
        write_grid_function_csv(f, str(path))
        g = read_grid_function_csv(str(path))
        assert np.allclose(f.values, g.values)
        assert path.read_text().splitlines()[0] == "u,value"

    def test_roundtrip_2d(self, tmp_path):
        grid = Grid.regular(0, 1, 5, dim=2)
        f = GridFunction.from_callable(grid, lambda a, b: a + 2 * b)
        path = tmp_path / "f2.csv"
        write_grid_function_csv(f, str(path))
        g = read_grid_function_csv(str(path))
        assert np.allclose(f.values, g.values)
        assert path.read_text().splitlines()[0] == "u,u2,value"

    def test_non_finite_rejected(self):
        grid = Grid.regular(0, 1, 5)
        with pytest.raises(ValueError):
            GridFunction(grid, np.array([0, 1, np.nan, 3, 4.0]))
