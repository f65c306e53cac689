#!/usr/bin/env python3
"""
截面与碰撞算子单元测试
次临界校验、K 与 K* 的离散转置关系、输入检查与内存上限
"""

import numpy as np
import pytest

from cross_sections import (Channel, CrossSections, Material, apply_collision, apply_collision_adjoint,
                            deposition_field, scale_by_speed, toy_isotropic, total_cross_section_field,
                            validate)
from discretization import inner_product
from errors import InputValidationError, MemoryLimitError, NegativeData
from geometry import Ball, Region
from runtime import get_resource_budget


def coupled_family(grid, with_table: bool = False):
    core = Region("core", Ball(radius=0.5))
    materials = [Material(sigma_a=[1.0, 1.2, 1.4], sigma_s=[0.3, 0.3, 0.3], kappa=[1.0, 0.5, 0.5]),
                 Material(sigma_a=[2.0, 2.2, 2.4], sigma_s=[0.3, 0.3, 0.3], kappa=[2.0, 1.0, 1.0])]
    channels = [
        Channel(src=0, dst=0, strength=[0.4, 0.6], angular="screened", g=0.5),
        Channel(src=0, dst=1, strength=[0.2, 0.3], energy="downscatter"),
        Channel(src=1, dst=2, strength=[0.1, 0.1], angular="screened", g=0.3, energy="elastic"),
        Channel(src=2, dst=1, strength=0.05),
    ]
    table = None
    if with_table:
        Q, M = grid.angular.size, grid.energy.size
        table = np.random.default_rng(7).uniform(0.0, 0.01, size=(3, 3, Q, Q, M, M))
    return CrossSections([core], materials, channels, table)


class TestValidate:
    """次临界条件"""

    def test_toy_margins(self, ball_grid):
        report = validate(toy_isotropic(0.3, 0.7), ball_grid)
        assert report.satisfied
        assert report.c_row == pytest.approx(0.3, abs=1e-12)
        assert report.c_col == pytest.approx(0.3, abs=1e-12)
        assert report.C_row == pytest.approx(0.7, abs=1e-12)
        assert set(report.as_dict()) >= {'c_row', 'c_col', 'C_row', 'C_col', 'satisfied'}
        print("✅ 玩具族次临界常数测试通过")

    def test_no_absorption_fails(self, ball_grid):
        report = validate(toy_isotropic(0.0, 1.0), ball_grid)
        assert not report.satisfied
        assert report.c_row == pytest.approx(0.0, abs=1e-12)

    def test_coupled_family(self, ball_grid):
        report = validate(coupled_family(ball_grid), ball_grid)
        assert report.satisfied
        assert len(report.per_species['c_row']) == 3

    def test_negative_data(self, ball_grid):
        xs = CrossSections([], [Material(sigma_a=-0.1, sigma_s=0.0, kappa=1.0)])
        with pytest.raises(NegativeData):
            validate(xs, ball_grid)


class TestCollisionOperator:
    """⟨Kψ, φ⟩ = ⟨ψ, K*φ⟩"""

    @pytest.mark.parametrize("with_table", [False, True])
    def test_adjoint_pairing(self, ball_grid, rng, with_table):
        xs = coupled_family(ball_grid, with_table)
        psi = rng.uniform(size=ball_grid.shape)
        phi = rng.uniform(size=ball_grid.shape)
        lhs = inner_product(apply_collision(xs, psi, ball_grid), phi, ball_grid)
        rhs = inner_product(psi, apply_collision_adjoint(xs, phi, ball_grid), ball_grid)
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
        print("✅ 碰撞算子转置测试通过")

    def test_isotropic_preserves_constants(self, ball_grid):
        xs = toy_isotropic(1.0, 0.5)
        out = apply_collision(xs, np.ones(ball_grid.shape), ball_grid)
        np.testing.assert_allclose(out, 0.5, rtol=1e-12)

    def test_region_fields(self, ball_grid):
        xs = coupled_family(ball_grid)
        sigma = total_cross_section_field(xs, ball_grid)
        kappa = deposition_field(xs, ball_grid)
        center = np.argmin(np.linalg.norm(ball_grid.spatial.nodes, axis=1))
        # 核心区 Σ₀ = σ_a + 出射通道强度
        assert sigma[0, center, 0, 0] == pytest.approx(2.0 + 0.6 + 0.3)
        assert kappa[0, center, 0, 0] == pytest.approx(2.0)

    def test_speed_scaling_shape(self, ball_grid):
        with pytest.raises(InputValidationError):
            scale_by_speed(toy_isotropic(1.0, 0.5), np.ones((3, 5)), ball_grid)


class TestInputs:
    def test_bad_channel(self):
        with pytest.raises(InputValidationError):
            Channel(src=0, dst=0, strength=1.0, angular="forward")
        with pytest.raises(InputValidationError):
            Channel(src=0, dst=0, strength=1.0, angular="screened", g=1.0)
        with pytest.raises(InputValidationError):
            Channel(src=0, dst=0, strength=1.0, energy="upscatter")

    def test_material_count(self):
        with pytest.raises(InputValidationError):
            CrossSections([Region("a", Ball(radius=0.5))], [Material(1.0, 0.0, 1.0)])

    def test_dense_table_limit(self):
        with pytest.raises(MemoryLimitError) as exc_info:
            get_resource_budget().require_dense(3 * 1024 ** 3, "测试稠密核")
        assert exc_info.value.details['bytes'] == 3 * 1024 ** 3
        print("✅ 稠密核内存上限测试通过")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
