#!/usr/bin/env python3
"""
场景配置与命令行测试
TOML 解析/序列化、错误定位，以及各子命令的退出码与输出产物
"""

import json
from pathlib import Path

import pandas as pd
import pytest

from cli import main
from errors import ConfigError
from scenario import build_case, load_scenario, parse_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

SMALL_ABSORBER = """
[domain]
kind = "ball"

[grid]
nx = 6
n_polar = 2
n_azimuth = 4

[xs]
sigma_a = 1.0

[sources.f]
kind = "constant"
value = 1.0

[run]
name = "small-absorber"
"""

SPEC_KEYED = """
[domain]
kind = "box"

[grid]
nx = 4
n_polar = 2
n_azimuth = 4
n_energy = 3

[xs]
sigma_a = 1.0
sigma_s = 0.5
kernel = "screened"
g = 0.5

[sources.f]
kind = "constant"
"""

TRANSFER_BLOCK = """
[[xs.transfer]]
src = 0
dst = 1
strength = 0.1
energy = "downscatter"
"""

SMALL_PLAN = """
[grid]
nx = 6
n_polar = 2
n_azimuth = 4

[regions.tumor]
radius = 0.35
label = "target"

[regions.organ]
center = [0.5, 0.0, 0.0]
radius = 0.3
label = "critical"

[xs]
sigma_a = 0.6
sigma_s = 0.4

[rx]
d0 = 1.0
c = 1.0
dcap_c = 0.2

[planning]
theta = "auto"
fixed_point_tol = 1e-8
n_starts = 1
pg_max_iter = 5

[solver]
tol = 1e-10
"""


def write(tmp_path: Path, name: str, text: str) -> Path:
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestScenario:
    def test_defaults_fill_in(self):
        sc = parse_scenario(SMALL_ABSORBER)
        assert sc.grid.nx == 6
        assert sc.grid.n_energy == 2
        assert sc.xs.kernel == "isotropic"
        assert sc.rx is None
        case = build_case(sc)
        assert case.g is None
        assert case.f.shape == case.grid.shape
        print("✅ 场景默认值测试通过")

    def test_round_trip(self):
        sc = load_scenario(SCENARIOS / "planning.toml")
        again = parse_scenario(sc.to_toml())
        assert again == sc
        assert again.config_hash() == sc.config_hash()

    def test_hash_ignores_threads(self):
        sc = parse_scenario(SMALL_ABSORBER)
        threaded = sc.model_copy(update={'solver': sc.solver.model_copy(update={'threads': 8})})
        assert threaded.config_hash() == sc.config_hash()

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_scenario("[grid]\nnx = 8\nresolution = 3\n")
        assert "grid.resolution" in exc.value.message

    def test_syntax_error_has_position(self):
        with pytest.raises(ConfigError) as exc:
            parse_scenario("[grid]\nnx = 8\nn_polar = = 2\n")
        assert exc.value.line == 3

    def test_undefined_region_reference(self):
        with pytest.raises(ConfigError):
            parse_scenario("[xs.region.core]\nsigma_a = 1.0\n")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_scenario(tmp_path / "missing.toml")

    def test_energy_resolution_and_kernel_keys(self):
        sc = parse_scenario(SPEC_KEYED)
        assert sc.grid.n_energy == 3
        assert sc.xs.kernel == "screened"
        case = build_case(sc)
        assert case.grid.energy.size == 3
        assert case.f.shape == (3, case.grid.spatial.size, case.grid.angular.size, 3)
        assert [ch.angular for ch in case.xs.channels] == ["screened"] * 3
        assert all(ch.g == 0.5 for ch in case.xs.channels)
        print("✅ grid.n_energy 与 xs.kernel 解析测试通过")

    def test_transfer_kernel(self):
        transfer = SPEC_KEYED.replace('kernel = "screened"', 'kernel = "transfer"') + TRANSFER_BLOCK
        case = build_case(parse_scenario(transfer))
        diagonal = [ch for ch in case.xs.channels if ch.src == ch.dst]
        coupling = [ch for ch in case.xs.channels if ch.src != ch.dst]
        assert all(ch.angular == "screened" for ch in diagonal)
        assert [(ch.src, ch.dst) for ch in coupling] == [(0, 1)]

        isotropic = SPEC_KEYED.replace('kernel = "screened"', 'kernel = "isotropic"')
        assert all(ch.angular == "isotropic" for ch in build_case(parse_scenario(isotropic)).xs.channels)

    def test_transfer_kernel_consistency(self):
        with pytest.raises(ConfigError):
            parse_scenario(SPEC_KEYED.replace('kernel = "screened"', 'kernel = "transfer"'))
        with pytest.raises(ConfigError):
            parse_scenario(SPEC_KEYED + TRANSFER_BLOCK)
        with pytest.raises(ConfigError):
            parse_scenario(SPEC_KEYED.replace('kernel = "screened"', 'kernel = "forward"'))
        with pytest.raises(ConfigError) as exc:
            parse_scenario("[energy]\nn = 2\n")
        assert "energy.n" in exc.value.message

    def test_boundary_patch_source(self):
        case = build_case(load_scenario(SCENARIOS / "two_region_mc.toml").model_copy(
            update={'grid': parse_scenario("[grid]\nnx = 6\nn_polar = 2\nn_azimuth = 4\n").grid}))
        assert case.f is None
        assert case.g.max() == 1.0
        assert not (case.g[0] * ~case.grid.boundary.inflow[:, :, None]).any()


class TestCli:
    """子命令退出码与产物"""

    def test_validate_xs_exit_codes(self, tmp_path):
        assert main(["validate-xs", str(SCENARIOS / "toy_isotropic.toml"), "--out", str(tmp_path / "a")]) == 0
        assert main(["validate-xs", str(SCENARIOS / "no_absorption.toml"), "--out", str(tmp_path / "b")]) == 1
        report = (tmp_path / "b" / "report.txt").read_text(encoding="utf-8")
        assert "satisfied = False" in report
        print("✅ validate-xs 退出码测试通过")

    def test_solve_writes_artifacts(self, tmp_path, capsys):
        config = write(tmp_path, "absorber.toml", SMALL_ABSORBER)
        out = tmp_path / "out"
        assert main(["solve", str(config), "--out", str(out), "--threads", "2"]) == 0
        assert "closed_form_max_error" in capsys.readouterr().out
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest['status'] == "ok"
        assert manifest['threads'] == 2
        assert manifest['config_sha256'] == load_scenario(config).config_hash()
        assert {"flux.csv", "dose.csv", "report.txt"} <= set(manifest['outputs'])
        assert (out / "run.log").exists()
        flux = pd.read_csv(out / "flux.csv")
        assert list(flux.columns[-3:]) == ["phi_0", "phi_1", "phi_2"]

    def test_malformed_config_exit_2(self, tmp_path, capsys):
        config = write(tmp_path, "bad.toml", "[grid\nnx = 4\n")
        assert main(["solve", str(config), "--out", str(tmp_path / "out")]) == 2
        assert "配置错误" in capsys.readouterr().err

    def test_probe_regularity(self, tmp_path, capsys):
        assert main(["probe-regularity", "--p", "3", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.strip().endswith("DIVERGENT")
        assert (tmp_path / "probe.csv").exists()

    def test_probe_bad_exponent(self, tmp_path):
        assert main(["probe-regularity", "--p", "5", "--out", str(tmp_path)]) == 2

    def test_evolve(self, tmp_path, capsys):
        text = SMALL_ABSORBER + "\n[energy]\ne0 = 0.5\n\n[time]\nT = 0.2\nn_steps = 2\n"
        config = write(tmp_path, "evolve.toml", text)
        assert main(["evolve", str(config), "--out", str(tmp_path / "out")]) == 0
        traj = pd.read_csv(tmp_path / "out" / "trajectory.csv")
        assert len(traj) == 3
        assert traj['mass'].iloc[-1] > 0.0
        assert "final_mass" in capsys.readouterr().out

    def test_plan_then_optimize(self, tmp_path, capsys):
        config = write(tmp_path, "plan.toml", SMALL_PLAN)
        init_dir = tmp_path / "init"
        assert main(["plan-init", str(config), "--out", str(init_dir)]) == 0
        assert (init_dir / "init_control.csv").exists()
        assert (init_dir / "fixed_point.csv").exists()
        opt_dir = tmp_path / "opt"
        assert main(["optimize", str(config), "--phase", "convex", "--init", str(init_dir / "init_control.csv"),
                     "--out", str(opt_dir)]) == 0
        assert "objective_monotone = True" in capsys.readouterr().out
        log = pd.read_csv(opt_dir / "objective_log.csv")
        assert set(log['phase']) == {"convex"}
        print("✅ 规划命令测试通过")

    def test_plan_requires_rx(self, tmp_path):
        config = write(tmp_path, "absorber.toml", SMALL_ABSORBER)
        assert main(["plan-init", str(config), "--out", str(tmp_path / "out")]) == 2

    def test_oracle_mc_deterministic(self, tmp_path):
        config = write(tmp_path, "mc.toml", SMALL_ABSORBER)
        for name, threads in (("a", "1"), ("b", "3")):
            assert main(["oracle-mc", str(config), "--seed", "9", "--particles", "3000", "--threads", threads,
                         "--out", str(tmp_path / name)]) == 0
        a = pd.read_csv(tmp_path / "a" / "dose_mc.csv")
        b = pd.read_csv(tmp_path / "b" / "dose_mc.csv")
        pd.testing.assert_frame_equal(a, b)
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text(encoding="utf-8"))
        assert manifest['seed'] == 9

    def test_dump_config(self, tmp_path, capsys):
        config = write(tmp_path, "absorber.toml", SMALL_ABSORBER)
        assert main(["dump-config", str(config)]) == 0
        assert parse_scenario(capsys.readouterr().out) == load_scenario(config)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
