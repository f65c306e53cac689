#!/usr/bin/env python3
"""
几何模块单元测试
逃逸时间、边界分类、击中点与区域查询
"""

import numpy as np
import pytest

from errors import BadDirection, NotInterior, NotOnBoundary
from geometry import (Ball, BoundaryClass, Box, Region, boundary_hit, classify_boundary, escape_time,
                      escape_time_forward, random_directions, random_interior_points, region_index)


class TestEscapeTime:
    """逃逸时间 t(x,ω)"""

    def test_ball_center(self):
        dom = Ball()
        for omega in ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.6, 0.8, 0.0]):
            assert escape_time(dom, [0.0, 0.0, 0.0], omega) == pytest.approx(1.0, abs=1e-12)
        print("✅ 球心逃逸时间测试通过")

    def test_box_center(self):
        dom = Box()
        assert escape_time(dom, [0.5, 0.5, 0.5], [1.0, 0.0, 0.0]) == pytest.approx(0.5, abs=1e-12)
        assert escape_time(dom, [0.2, 0.5, 0.5], [1.0, 0.0, 0.0]) == pytest.approx(0.2, abs=1e-12)
        assert escape_time_forward(dom, [0.2, 0.5, 0.5], [1.0, 0.0, 0.0]) == pytest.approx(0.8, abs=1e-12)
        print("✅ 立方体逃逸时间测试通过")

    def test_shifted_ball(self):
        dom = Ball(center=(1.0, 2.0, 3.0), radius=2.0)
        assert escape_time(dom, [1.0, 2.0, 3.0], [0.0, 1.0, 0.0]) == pytest.approx(2.0)
        assert escape_time(dom, [1.0, 3.0, 3.0], [0.0, 1.0, 0.0]) == pytest.approx(3.0)

    def test_not_interior(self):
        with pytest.raises(NotInterior):
            escape_time(Ball(), [2.0, 0.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(NotInterior):
            escape_time(Box(), [1.0, 0.5, 0.5], [1.0, 0.0, 0.0])
        print("✅ 区域外点拒绝测试通过")

    def test_bad_direction(self):
        with pytest.raises(BadDirection):
            escape_time(Ball(), [0.0, 0.0, 0.0], [1.0, 1.0, 0.0])
        with pytest.raises(BadDirection):
            escape_time(Ball(), [0.0, 0.0, 0.0], [0.0, 0.0])

    def test_shift_along_characteristic(self, rng):
        """t(x − sω, ω) = t(x, ω) − s"""
        dom = Ball()
        X = random_interior_points(dom, rng, 200)
        W = random_directions(rng, 200)
        t = dom.escape_times(X, W)
        s = 0.5 * t
        shifted = dom.escape_times(X - s[:, None] * W, W)
        np.testing.assert_allclose(shifted, t - s, atol=1e-12)
        print("✅ 特征线平移测试通过")

    def test_gradient_along_direction(self, rng):
        """ω·∇ₓt = 1"""
        dom = Ball()
        X = random_interior_points(dom, rng, 200) * 0.9
        W = random_directions(rng, 200)
        grad = dom.escape_time_gradient(X, W)
        np.testing.assert_allclose(np.einsum("ij,ij->i", grad, W), 1.0, atol=1e-10)

    def test_escape_bounded_by_diameter(self, rng):
        for dom in (Ball(), Box()):
            X = random_interior_points(dom, rng, 500)
            W = random_directions(rng, 500)
            t = dom.escape_times(X, W)
            assert np.all(t > 0)
            assert np.all(t <= dom.diameter + 1e-12)


class TestBoundary:
    """边界分类与击中点"""

    def test_classify_ball_pole(self):
        dom = Ball()
        y = [0.0, 0.0, 1.0]
        assert classify_boundary(dom, y, [0.0, 0.0, -1.0]) == BoundaryClass.INFLOW
        assert classify_boundary(dom, y, [0.0, 0.0, 1.0]) == BoundaryClass.OUTFLOW
        assert classify_boundary(dom, y, [1.0, 0.0, 0.0]) == BoundaryClass.TANGENT
        print("✅ 边界分类测试通过")

    def test_classify_not_on_boundary(self):
        with pytest.raises(NotOnBoundary):
            classify_boundary(Ball(), [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])

    def test_boundary_hit_point(self):
        hit = boundary_hit(Ball(), [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(hit.point, [0.0, 0.0, -1.0], atol=1e-12)
        np.testing.assert_allclose(hit.normal, [0.0, 0.0, -1.0], atol=1e-12)
        assert hit.time == pytest.approx(1.0)
        assert classify_boundary(Ball(), hit.point, [0.0, 0.0, 1.0]) == BoundaryClass.INFLOW

    def test_box_hit_inside_face(self):
        hit = boundary_hit(Box(), [0.3, 0.4, 0.5], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(hit.point, [0.0, 0.4, 0.5], atol=1e-12)
        np.testing.assert_allclose(hit.normal, [-1.0, 0.0, 0.0], atol=1e-12)


class TestRegions:
    def test_region_index_later_overrides(self):
        outer = Region("outer", Ball(radius=0.8))
        inner = Region("inner", Ball(radius=0.3))
        X = np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.0]])
        np.testing.assert_array_equal(region_index([outer, inner], X), [2, 1, 0])
        print("✅ 子区域索引测试通过")

    def test_random_interior_points_inside(self, rng):
        dom = Ball(center=(0.5, 0.0, 0.0), radius=0.5)
        X = random_interior_points(dom, rng, 300)
        assert X.shape == (300, 3)
        assert dom.contains_points(X).all()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
