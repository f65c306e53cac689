#!/usr/bin/env python3
"""
剂量规划单元测试
目标函数、伴随梯度的有限差分检验、初始解的最优性与投影梯度的单调性
"""

import numpy as np
import pytest

from cross_sections import toy_isotropic
from discretization import build_phase_grid
from errors import BadExponent, ShapeMismatch
from geometry import Ball, Region
from planning import (CRITICAL, NORMAL, TARGET, ControlSupport, DoseVolume, PlanningCase, PlanningOptions,
                      PlanWeights, Prescription, RegionMap, dv_fraction, evaluate_objective, objective_gradient,
                      optimize_projected_gradient, ramp, ramp_derivative, solve_initial_external,
                      solve_initial_internal)
from transport import SolveOptions


REGIONS = [Region("tumor", Ball(radius=0.35), label="target"),
           Region("organ", Ball(center=(0.5, 0.0, 0.0), radius=0.3), label="critical")]


@pytest.fixture(scope="module")
def grid():
    return build_phase_grid(Ball(), nx=6, n_polar=2, n_azimuth=4, n_energy=2)


def make_case(grid, **rx_kwargs) -> PlanningCase:
    xs = toy_isotropic(0.6, 0.4, regions=REGIONS)
    params = dict(d0=1.0, c=1.0, weights=PlanWeights(c_t=1.0, c_c=1.0, c_n=0.1))
    params.update(rx_kwargs)
    rx = Prescription(**params)
    opts = PlanningOptions(theta="auto", fixed_point_tol=1e-9, max_fixed_point=400, n_starts=2,
                           pg_max_iter=20, solve=SolveOptions(tol=1e-12))
    return PlanningCase(xs, grid, RegionMap.from_regions(REGIONS, grid), rx, opts=opts)


class TestRegionsAndObjective:
    def test_region_map(self, grid):
        regions = RegionMap.from_regions(REGIONS, grid)
        assert regions.target.sum() == 8
        assert regions.critical.sum() == 4
        assert regions.normal.sum() == grid.spatial.size - 12
        with pytest.raises(ShapeMismatch):
            RegionMap(np.full(grid.spatial.size, 5))

    def test_region_map_csv(self, grid, tmp_path):
        path = tmp_path / "labels.csv"
        i, j, k = grid.spatial.ijk[0]
        i2, j2, k2 = grid.spatial.ijk[1]
        path.write_text(f"ix,iy,iz,label\n{i},{j},{k},target\n{i2},{j2},{k2},{CRITICAL}\n")
        regions = RegionMap.from_csv(path, grid)
        assert regions.labels[0] == TARGET
        assert regions.labels[1] == CRITICAL
        assert np.all(regions.labels[2:] == NORMAL)

    def test_ramp(self):
        np.testing.assert_allclose(ramp(np.array([-1.0, 0.0, 0.05, 0.1, 2.0]), 0.1), [0.0, 0.0, 0.5, 1.0, 1.0])

    def test_objective_terms(self, grid):
        regions = RegionMap.from_regions(REGIONS, grid)
        rx = Prescription(d0=2.0, dcap_c=0.5, dv=DoseVolume(d_c=0.5, v_c=0.0),
                          weights=PlanWeights(c_dv=1.0), eps=0.1)
        dose = np.ones(grid.spatial.size)
        vol = grid.spatial.cell_volumes
        rep = evaluate_objective(dose, rx, regions, 2, grid)
        assert rep.J_T == pytest.approx(np.sum(vol[regions.target]))
        assert rep.J_C == pytest.approx(0.25 * np.sum(vol[regions.critical]))
        assert rep.J_N == pytest.approx(np.sum(vol[regions.normal]))
        assert rep.J_DV == pytest.approx(1.0)
        print("✅ 目标函数各项测试通过")

    def test_bad_exponent(self, grid):
        regions = RegionMap.from_regions(REGIONS, grid)
        with pytest.raises(BadExponent):
            evaluate_objective(np.ones(grid.spatial.size), Prescription(d0=1.0), regions, 3, grid)
        with pytest.raises(BadExponent):
            objective_gradient(make_case(grid), np.zeros(grid.boundary_shape), p=1)


class TestConvexity:
    """c_DV = 0 时目标函数的凸性与 Hε 的 Lipschitz 界"""

    def test_midpoint(self, grid):
        case = make_case(grid, dcap_c=0.2, dcap_n=0.3, weights=PlanWeights(c_t=1.0, c_c=2.0, c_n=0.5, c_dv=0.0))
        space = case.space
        rng = np.random.default_rng(6)

        def J(values):
            return case.full_objective(values, include_dv=False)[0].total

        for _ in range(20):
            u = space.project(rng.uniform(0.0, 2.0, size=space.shape))
            v = space.project(rng.uniform(0.0, 2.0, size=space.shape))
            average = 0.5 * (J(u) + J(v))
            assert J(0.5 * (u + v)) <= average + 1e-10 * max(1.0, abs(average))
        print("✅ 目标函数中点凸性测试通过")

    def test_ramp_lipschitz(self):
        eps = 0.1
        rng = np.random.default_rng(7)
        a = rng.uniform(-0.2, 0.3, size=50)
        b = a + rng.uniform(-0.1, 0.1, size=50)
        L = np.abs(ramp(a, eps) - ramp(b, eps)) / np.abs(a - b)
        assert L.max() <= 1.0 / eps + 1e-12
        assert np.all(ramp_derivative(a, eps) <= 1.0 / eps)

    def test_dose_volume_lipschitz(self, grid):
        regions = RegionMap.from_regions(REGIONS, grid)
        rx = Prescription(d0=1.0, dv=DoseVolume(d_c=0.5, v_c=0.2), eps=0.1)
        vol = grid.spatial.cell_volumes
        C = regions.critical
        rng = np.random.default_rng(8)
        for _ in range(50):
            dose = rng.uniform(0.0, 1.0, size=grid.spatial.size)
            other = dose + rng.normal(scale=0.05, size=grid.spatial.size)
            gap = abs(dv_fraction(dose, rx, regions, grid) - dv_fraction(other, rx, regions, grid))
            bound = np.sum(np.abs(dose - other)[C] * vol[C]) / (rx.epsilon * vol[C].sum())
            assert gap <= bound + 1e-12
        print("✅ Hε Lipschitz 界测试通过")


class TestGradient:
    """伴随梯度与中心差分"""

    def check_directions(self, case, n_directions, seed):
        rng = np.random.default_rng(seed)
        space = case.space
        u = space.project(rng.uniform(0.5, 1.5, size=space.shape))
        grad, _ = objective_gradient(case, u, include_dv=False)
        eps = 1e-3
        for _ in range(n_directions):
            d = space.restrict(rng.normal(size=space.shape))
            plus = case.full_objective(u + eps * d, include_dv=False)[0].total
            minus = case.full_objective(u - eps * d, include_dv=False)[0].total
            fd = (plus - minus) / (2.0 * eps)
            analytic = space.inner(grad, d)
            assert abs(fd - analytic) <= 1e-4 * space.norm(grad) * space.norm(d)

    def test_external(self, grid):
        case = make_case(grid, dcap_c=0.2, dcap_n=0.3, weights=PlanWeights(c_t=1.0, c_c=2.0, c_n=0.5))
        self.check_directions(case, 5, seed=1)
        print("✅ 外照射梯度有限差分测试通过")

    def test_internal_with_scatter_penalty(self, grid):
        case = make_case(grid, mode="internal", reduction="energy_independent",
                         weights=PlanWeights(c_t=1.0, c_c=1.0, c_n=0.1, c_sc=0.05))
        self.check_directions(case, 3, seed=2)

    @pytest.mark.slow
    def test_external_many_directions(self, grid):
        case = make_case(grid, dcap_c=0.2, dcap_n=0.3)
        self.check_directions(case, 20, seed=3)


class TestInitialSolution:
    def check_optimality(self, case, n_perturbations, seed):
        result = solve_initial_external(case)
        u = result.control.values
        assert u.min() >= 0.0
        assert np.count_nonzero(u) > 0
        assert result.complementarity_residual < 1e-6
        J = case.tracking_objective(u)
        rng = np.random.default_rng(seed)
        amp = 0.1 * u.max()
        for _ in range(n_perturbations):
            trial = case.space.project(u + case.space.restrict(amp * rng.normal(size=u.shape)))
            assert case.tracking_objective(trial) >= J - 1e-9 * abs(J)
        return result

    def test_external_optimality(self, grid):
        result = self.check_optimality(make_case(grid), 5, seed=4)
        print(f"✅ 外照射初始解最优性测试通过 ({result.iterations} 次不动点迭代, θ={result.theta:.3f})")

    @pytest.mark.slow
    def test_external_optimality_many_perturbations(self, grid):
        self.check_optimality(make_case(grid), 50, seed=5)

    def test_internal_support(self, grid):
        support = ControlSupport(region="tumor", species=[0])
        case = make_case(grid, mode="internal", reduction="energy_angle_independent", control_support=support)
        result = solve_initial_internal(case)
        u = result.control.values
        assert u.shape == (3, grid.spatial.size, 1, 1)
        assert np.all(u[1:] == 0.0)
        outside = ~RegionMap.from_regions(REGIONS, grid).target
        assert np.all(u[0, outside] == 0.0)
        assert u[0].max() > 0.0

    def test_mode_mismatch(self, grid):
        with pytest.raises(ShapeMismatch):
            solve_initial_internal(make_case(grid))


class TestProjectedGradient:
    def test_convex_then_dv(self, grid):
        case = make_case(grid, dcap_c=0.2, dcap_n=0.3, dv=DoseVolume(d_c=0.3, v_c=0.2),
                         weights=PlanWeights(c_t=1.0, c_c=1.0, c_n=0.1, c_dv=1.0))
        init = solve_initial_external(case)
        convex = optimize_projected_gradient(case, init.control.values, phase="convex")
        history = np.array(convex.history)
        assert np.all(np.diff(history) <= 1e-12 * np.abs(history[:-1]))
        assert convex.control.values.min() >= 0.0

        handoff = case.full_objective(convex.control.values, include_dv=True)[0].total
        dv = optimize_projected_gradient(case, convex.control.values, phase="dv")
        assert dv.objective.total <= handoff + 1e-12 * abs(handoff)
        print("✅ 投影梯度单调性测试通过")

    def test_unknown_phase(self, grid):
        case = make_case(grid)
        with pytest.raises(ValueError):
            optimize_projected_gradient(case, case.space.zeros(), phase="global")


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
