#!/usr/bin/env python3
"""
相空间离散单元测试
求积权重、边界面元、场检查、范数与插值
"""

import numpy as np
import pytest

from discretization import (AnalyticField, AngularQuadrature, EnergyGrid, boundary_inner, boundary_patch,
                            build_phase_grid, check_field, from_function, full, integrate_phase,
                            interpolate_spatial, trace_norm, zeros)
from errors import BadExponent, ShapeMismatch
from geometry import Ball


class TestQuadrature:
    """角度与能量求积"""

    def test_angular_weights(self):
        quad = AngularQuadrature.build(4, 8)
        assert quad.weights.sum() == pytest.approx(4.0 * np.pi, rel=1e-12)
        np.testing.assert_allclose(np.linalg.norm(quad.nodes, axis=1), 1.0, atol=1e-14)
        # 一阶矩为零
        np.testing.assert_allclose(quad.weights @ quad.nodes, 0.0, atol=1e-12)
        print("✅ 角度求积权重测试通过")

    def test_antipodal_closure(self):
        assert AngularQuadrature.build(2, 4).antipodal
        assert not AngularQuadrature.build(2, 3).antipodal
        quad = AngularQuadrature.build(3, 6)
        np.testing.assert_allclose(quad.nodes[quad.antipode], -quad.nodes, atol=1e-12)

    def test_energy_grid(self):
        grid = EnergyGrid.build(0.5, 2.0, 3)
        assert grid.weights.sum() == pytest.approx(1.5)
        assert np.all((grid.nodes > 0.5) & (grid.nodes < 2.0))
        with pytest.raises(ValueError):
            EnergyGrid.build(1.0, 1.0, 3)
        with pytest.raises(ValueError):
            EnergyGrid.build(-0.1, 1.0, 3)

    def test_grid_counts(self):
        with pytest.raises(ValueError):
            build_phase_grid(Ball(), nx=1, n_polar=2, n_azimuth=4, n_energy=2)
        with pytest.raises(ValueError):
            build_phase_grid(Ball(), nx=4, n_polar=2, n_azimuth=4, n_energy=1)


class TestSpatialGrid:
    def test_box_volumes_exact(self, box_grid):
        assert box_grid.spatial.cell_volumes.sum() == pytest.approx(1.0, rel=1e-12)
        print("✅ 立方体单元体积测试通过")

    def test_ball_volume(self, ball_grid):
        total = ball_grid.spatial.cell_volumes.sum()
        assert total == pytest.approx(4.0 / 3.0 * np.pi, rel=0.1)
        assert ball_grid.domain.contains_points(ball_grid.spatial.nodes).all()

    def test_linear_interpolation_exact(self, box_grid):
        a = np.array([1.0, -2.0, 0.5])
        field = from_function(box_grid, lambda X, W, E: (X @ a + 3.0)[None, :, None, None])
        for x in ([0.5, 0.5, 0.5], [0.3, 0.6, 0.45], [0.27, 0.71, 0.52]):
            value = interpolate_spatial(field, box_grid, x, j=1, q=2, m=0)
            assert value == pytest.approx(np.dot(a, x) + 3.0, abs=1e-12)
        print("✅ 线性场插值精确性测试通过")

    def test_interpolation_index_check(self, box_grid):
        with pytest.raises(ShapeMismatch):
            interpolate_spatial(zeros(box_grid), box_grid, [0.5, 0.5, 0.5], j=3, q=0, m=0)


class TestBoundaryQuadrature:
    """边界面元"""

    def test_areas(self, ball_grid, box_grid):
        assert ball_grid.boundary.areas.sum() == pytest.approx(4.0 * np.pi, rel=1e-12)
        assert box_grid.boundary.areas.sum() == pytest.approx(6.0, rel=1e-12)

    def test_inflow_outflow_balance(self, ball_grid, box_grid):
        for grid in (ball_grid, box_grid):
            w_in = grid.boundary_weights("inflow").sum()
            w_out = grid.boundary_weights("outflow").sum()
            assert w_in > 0
            assert w_in == pytest.approx(w_out, rel=1e-12)
            assert not np.any(grid.boundary.inflow & grid.boundary.outflow)
        print("✅ 入流/出流权重平衡测试通过")

    def test_locate_roundtrip(self, ball_grid, box_grid):
        for grid in (ball_grid, box_grid):
            b = grid.boundary
            np.testing.assert_array_equal(b.locate(b.points, b.normals), np.arange(b.size))

    def test_patch_subset_of_inflow(self, ball_grid):
        patch = boundary_patch(ball_grid, center=(0.0, 0.0, -1.0), radius=0.6)
        assert patch.any()
        inflow = np.broadcast_to(ball_grid.boundary.inflow[:, :, None], patch.shape)
        assert not np.any(patch & ~inflow)
        cone = boundary_patch(ball_grid, axis=(0.0, 0.0, 1.0), half_angle=60.0)
        assert np.all(ball_grid.angular.nodes[np.nonzero(cone)[1]] @ [0.0, 0.0, 1.0] >= 0.5 - 1e-12)

    def test_trace_norm_of_constant(self, ball_grid):
        g = np.ones(ball_grid.boundary_shape)
        expected = 3.0 * ball_grid.boundary_weights("inflow").sum()
        assert trace_norm(g, ball_grid) == pytest.approx(expected)
        assert boundary_inner(g, g, ball_grid) == pytest.approx(expected)


class TestFields:
    def test_check_field_shape(self, ball_grid):
        with pytest.raises(ShapeMismatch):
            check_field(np.zeros((3, 2, 2, 2)), ball_grid)
        with pytest.raises(ShapeMismatch):
            check_field(np.zeros(ball_grid.shape), ball_grid, boundary=True)
        bad = zeros(ball_grid)
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ShapeMismatch):
            check_field(bad, ball_grid)
        print("✅ 场形状检查测试通过")

    def test_integrate_constant(self, ball_grid):
        vol = ball_grid.spatial.cell_volumes.sum()
        expected = 3.0 * vol * 4.0 * np.pi * ball_grid.energy.width
        assert integrate_phase(full(ball_grid, 1.0), ball_grid) == pytest.approx(expected, rel=1e-12)
        per_species = vol * 4.0 * np.pi * ball_grid.energy.width
        assert integrate_phase(full(ball_grid, 1.0), ball_grid, p=2) == pytest.approx(np.sqrt(3.0 * per_species))

    def test_bad_exponent(self, ball_grid):
        with pytest.raises(BadExponent):
            integrate_phase(zeros(ball_grid), ball_grid, p=4)

    def test_analytic_field(self):
        v = AnalyticField.linear([1.0, 0.0, 0.0], c=2.0)
        X = np.array([[0.5, 0.0, 0.0]])
        W = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        value, directional = v.evaluate(X, W, np.array([0.5]))
        np.testing.assert_allclose(value[0, :, 0], 2.5)
        np.testing.assert_allclose(directional[0, :, 0], [1.0, 0.0])
        q = AnalyticField.quadratic()
        value, directional = q.evaluate(X, W, np.array([0.5]))
        np.testing.assert_allclose(value[0, :, 0], 0.25)
        np.testing.assert_allclose(directional[0, :, 0], [1.0, 0.0])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
