#!/usr/bin/env python3
"""
命令行入口
场景解析、子命令分发与可复现的运行产物（CSV、report.txt、run.log、manifest.json）
退出码：0 成功，1 领域失败，2 用法/解析错误
"""

import argparse
import json
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from cross_sections import validate
from discretization import N_SPECIES
from dose import accumulate_dose, compute_dose, dose_volume_histogram, write_dose_csv
from errors import ConfigError, ErrorHandler, WrongConfiguration
from geometry import Ball
from oracle import mc_transport_dose, regularity_probe
from planning import optimize_projected_gradient, solve_initial
from runtime import resolve_threads
from scenario import Case, Scenario, build_case, load_scenario
from timedep import evolve
from transport import constant_solution, solve_coupled

DEFAULT_EPS = (0.1, 0.03, 0.01, 0.003, 0.001)
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "loguru", "psutil")

error_handler = ErrorHandler()


def configure_logging(level: str = "INFO", log_file: Optional[Path] = None) -> Optional[int]:
    """移除默认输出，安装 stderr 与可选的文件输出；返回文件输出的 id"""
    logger.remove()
    logger.add(sys.stderr, level=level, format="{time:HH:mm:ss} | {level: <7} | {message}")
    if log_file is not None:
        return logger.add(str(log_file), level="DEBUG", encoding="utf-8")
    return None


def _versions() -> Dict[str, str]:
    out = {}
    for name in TRACKED_PACKAGES:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "unknown"
    out["python"] = sys.version.split()[0]
    return out


class RunContext:
    """一次命令运行的输出目录、日志与清单"""

    def __init__(self, command: str, out_dir: Path, scenario: Optional[Scenario], threads: int,
                 seed: Optional[int] = None, log_level: str = "INFO"):
        self.command = command
        self.out_dir = Path(out_dir)
        self.scenario = scenario
        self.threads = threads
        self.seed = seed
        self.log_level = log_level
        self.outputs: List[str] = []
        self.report: Dict[str, object] = {}
        self.start = 0.0
        self._sink = None

    def __enter__(self) -> "RunContext":
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._sink = configure_logging(self.log_level, self.out_dir / "run.log")
        self.start = time.time()
        logger.info(f"命令 {self.command} 开始, 输出目录 {self.out_dir}, 线程 {self.threads}")
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "ok" if exc is None else "failed"
        if self.report:
            self.write_report()
        manifest = {
            'command': self.command,
            'status': status,
            'config_sha256': self.scenario.config_hash() if self.scenario is not None else None,
            'versions': _versions(),
            'threads': self.threads,
            'seed': self.seed,
            'wall_time_s': round(time.time() - self.start, 3),
            'outputs': self.outputs,
        }
        if exc is not None:
            manifest['error'] = {'type': type(exc).__name__, 'message': str(exc)}
        (self.out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, ensure_ascii=False),
                                                    encoding="utf-8")
        logger.info(f"命令 {self.command} 结束: {status}, 用时 {manifest['wall_time_s']} 秒")
        if self._sink is not None:
            logger.remove(self._sink)
        return False

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def write_frame(self, name: str, df: pd.DataFrame):
        df.to_csv(self.path(name), index=False, float_format="%.12e")

    def write_report(self):
        lines = [f"{key} = {value}" for key, value in self.report.items()]
        path = self.out_dir / "report.txt"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        if "report.txt" not in self.outputs:
            self.outputs.append("report.txt")


# === 辅助 ===

def _load_case(args) -> Case:
    scenario = load_scenario(args.config)
    overrides = {}
    if getattr(args, "tol", None) is not None:
        overrides['tol'] = args.tol
    if getattr(args, "max_iter", None) is not None:
        overrides['max_iter'] = args.max_iter
    threads = resolve_threads(getattr(args, "threads", None) or scenario.run.threads)
    overrides['threads'] = threads
    scenario = scenario.model_copy(update={'solver': scenario.solver.model_copy(update=overrides)})
    args.threads = threads
    return build_case(scenario)


def _out_dir(args, scenario: Optional[Scenario]) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(scenario.run.out if scenario is not None else "output")


def flux_frame(psi: np.ndarray, case: Case) -> pd.DataFrame:
    """各粒子的标量通量 φⱼ = ∫ψⱼ dω dE"""
    grid = case.grid
    w = grid.angular.weights[:, None] * grid.energy.weights[None, :]
    phi = np.einsum("jnqm,qm->jn", psi, w)
    X = grid.spatial.nodes
    ijk = grid.spatial.ijk
    data = {'ix': ijk[:, 0], 'iy': ijk[:, 1], 'iz': ijk[:, 2], 'x': X[:, 0], 'y': X[:, 1], 'z': X[:, 2]}
    for j in range(N_SPECIES):
        data[f'phi_{j}'] = phi[j]
    return pd.DataFrame(data)


def phase_frame(psi: np.ndarray) -> pd.DataFrame:
    j, n, q, m = np.indices(psi.shape).reshape(4, -1)
    return pd.DataFrame({'species': j, 'node': n, 'direction': q, 'energy': m, 'psi': psi.ravel()})


def control_frame(values: np.ndarray) -> pd.DataFrame:
    nz = np.nonzero(values)
    return pd.DataFrame({'species': nz[0], 'index': nz[1], 'direction': nz[2], 'energy': nz[3],
                         'value': values[nz]})


def read_control(path: Path, shape) -> np.ndarray:
    df = pd.read_csv(path)
    values = np.zeros(shape)
    values[df['species'].to_numpy(), df['index'].to_numpy(), df['direction'].to_numpy(),
           df['energy'].to_numpy()] = df['value'].to_numpy()
    return values


def closed_form_error(psi: np.ndarray, case: Case) -> Optional[float]:
    """纯吸收、均匀 Σ、均匀体源且无边界源时与 q(1−e^{−Σt})/Σ 比较"""
    xs, f = case.xs, case.f
    if xs.has_kernel or case.g is not None or f is None or xs.uniform_sigma() is None:
        return None
    if not np.all(f == f[:, :1, :1, :1]):
        return None
    exact = constant_solution(xs.uniform_sigma(), f[:, 0, 0, 0], case.grid)
    return float(np.max(np.abs(psi - exact)))


# === 子命令 ===

def cmd_validate_xs(args) -> int:
    case = _load_case(args)
    with RunContext("validate-xs", _out_dir(args, case.scenario), case.scenario, args.threads) as ctx:
        report = validate(case.xs, case.grid)
        ctx.report.update(report.as_dict())
        for key, values in report.per_species.items():
            for j, v in enumerate(values):
                ctx.report[f'{key}_{j}'] = v
        print("\n".join(f"{k} = {v}" for k, v in report.as_dict().items()))
    return 0 if report.satisfied else 1


def cmd_solve(args) -> int:
    case = _load_case(args)
    with RunContext("solve", _out_dir(args, case.scenario), case.scenario, args.threads) as ctx:
        result = solve_coupled(case.xs, case.f, case.g, case.grid, case.scenario.solver)
        ctx.report.update(result.report.as_dict())
        ctx.write_frame("flux.csv", flux_frame(result.psi, case))
        if args.full_flux:
            ctx.write_frame("phase_flux.csv", phase_frame(result.psi))
        dose = compute_dose(result.psi, case.xs, case.grid)
        write_dose_csv(ctx.path("dose.csv"), dose, case.grid, normalized=True)
        err = closed_form_error(result.psi, case)
        if err is not None:
            ctx.report['closed_form_max_error'] = err
            print(f"closed_form_max_error = {err:.6e}")
        print(f"iterations = {result.report.iterations}, residual = {result.report.residual:.3e}")
    return 0


def cmd_evolve(args) -> int:
    case = _load_case(args)
    sc = case.scenario
    with RunContext("evolve", _out_dir(args, sc), sc, args.threads) as ctx:
        tg = case.time_grid
        traj = evolve(np.zeros(case.grid.shape), case.f, case.history, tg, case.xs, case.kinematics, case.grid,
                      n0=sc.time.n0, boundary_coupling=sc.time.boundary_coupling)
        ctx.write_frame("trajectory.csv", pd.DataFrame({
            't': traj.times,
            'mass': traj.mass,
            'streaming_loss': [0.0] + list(traj.streaming_loss),
        }))
        ctx.write_frame("flux_final.csv", flux_frame(traj.final, case))
        total = accumulate_dose(traj, tg, case.xs, case.grid)
        write_dose_csv(ctx.path("dose_accumulated.csv"), total, case.grid, normalized=True)
        ctx.report.update({'steps': tg.n_steps, 'dt': tg.dt, 'final_mass': traj.mass[-1],
                           'boundary_coupling': sc.time.boundary_coupling})
        print(f"final_mass = {traj.mass[-1]:.6e}")
    return 0


def cmd_dose(args) -> int:
    case = _load_case(args)
    sc = case.scenario
    with RunContext("dose", _out_dir(args, sc), sc, args.threads) as ctx:
        result = solve_coupled(case.xs, case.f, case.g, case.grid, sc.solver)
        dose = compute_dose(result.psi, case.xs, case.grid)
        write_dose_csv(ctx.path("dose.csv"), dose, case.grid, normalized=True)
        ctx.report.update({'dose_max': float(dose.max()), 'dose_mean': float(dose.mean())})
        if sc.rx is not None:
            regions = case.region_map()
            vol = case.grid.spatial.cell_volumes
            rows = []
            for name, mask in (("target", regions.target), ("critical", regions.critical),
                               ("normal", regions.normal)):
                thresholds, fractions = dose_volume_histogram(dose, mask, vol, args.bins)
                rows.append(pd.DataFrame({'region': name, 'dose': thresholds, 'volume_fraction': fractions}))
            ctx.write_frame("dvh.csv", pd.concat(rows, ignore_index=True))
        print(f"dose_max = {dose.max():.6e}")
    return 0


def _write_plan(ctx: RunContext, case: Case, result, prefix: str):
    ctx.write_frame(f"{prefix}_control.csv", control_frame(result.control.values))
    dose = compute_dose(result.psi, case.xs, case.grid)
    write_dose_csv(ctx.path(f"{prefix}_dose.csv"), dose, case.grid, normalized=True)
    for key, value in result.summary().items():
        ctx.report[f"{prefix}.{key}"] = value


def cmd_plan_init(args) -> int:
    args.phase = "init"
    args.init = None
    return _run_plan(args, "plan-init")


def cmd_optimize(args) -> int:
    return _run_plan(args, "optimize")


def _run_plan(args, command: str) -> int:
    case = _load_case(args)
    sc = case.scenario
    with RunContext(command, _out_dir(args, sc), sc, args.threads, seed=sc.planning.seed) as ctx:
        pc = case.planning_case()
        if args.init:
            init = read_control(Path(args.init), pc.space.shape)
        else:
            initial = solve_initial(pc)
            _write_plan(ctx, case, initial, "init")
            ctx.write_frame("fixed_point.csv", pd.DataFrame({
                'iteration': np.arange(1, len(initial.history) + 1), 'relative_change': initial.history}))
            init = initial.control.values
        log = []
        phases = {"init": [], "convex": ["convex"], "dv": ["convex", "dv"]}[args.phase]
        for phase in phases:
            result = optimize_projected_gradient(pc, init, phase=phase)
            _write_plan(ctx, case, result, phase)
            log += [{'phase': phase, 'iteration': k, 'objective': J} for k, J in enumerate(result.history)]
            init = result.control.values
        if log:
            df = pd.DataFrame(log)
            ctx.write_frame("objective_log.csv", df)
            monotone = all(np.all(np.diff(g['objective'].to_numpy()) <= 1e-12 * (1.0 + g['objective'].abs().max()))
                           for _, g in df.groupby('phase'))
            ctx.report['objective_monotone'] = monotone
            print(f"objective_monotone = {monotone}")
        ctx.report['solves'] = pc.n_solves
    return 0


def cmd_probe_regularity(args) -> int:
    scenario = load_scenario(args.config) if args.config else None
    domain, sigma = Ball(), 1.0
    if scenario is not None:
        if scenario.domain.kind != "ball":
            raise WrongConfiguration("正则性探针需要球域")
        domain = scenario.domain.build()
        sigma = float(np.atleast_1d(scenario.xs.sigma_a)[0] + np.atleast_1d(scenario.xs.sigma_s)[0])
    with RunContext("probe-regularity", _out_dir(args, scenario), scenario, 1) as ctx:
        result = regularity_probe(args.p, args.eps, args.resolution, domain=domain, sigma=sigma)
        ctx.write_frame("probe.csv", pd.DataFrame({'eps': result.eps, 'norm': result.norms}))
        ctx.report.update({'p': result.p, 'verdict': result.verdict,
                           'increment_ratio': result.increment_ratio, 'threshold': result.threshold,
                           'growth': result.norms[-1] / result.norms[0]})
        for e, v in result.table():
            print(f"{e:.6g}\t{v:.8g}")
        print(result.verdict)
    return 0


def cmd_oracle_mc(args) -> int:
    case = _load_case(args)
    sc = case.scenario
    seed = args.seed if args.seed is not None else sc.run.seed
    n = args.particles or sc.run.n_particles
    with RunContext("oracle-mc", _out_dir(args, sc), sc, args.threads, seed=seed) as ctx:
        result = mc_transport_dose(case.xs, case.f, case.g, case.grid, n, seed, threads=args.threads)
        write_dose_csv(ctx.path("dose_mc.csv"), result.dose, case.grid, stderr=result.stderr)
        ctx.report.update({'n_particles': n, 'seed': seed, 'chunks': result.n_chunks,
                           'dose_max': float(result.dose.max()), 'stderr_max': float(result.stderr.max())})
        print(f"dose_max = {result.dose.max():.6e}, stderr_max = {result.stderr.max():.3e}")
    return 0


def cmd_dump_config(args) -> int:
    scenario = load_scenario(args.config)
    text = scenario.to_toml()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return 0


# === 解析器 ===

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bte", description="三粒子线性玻尔兹曼输运求解与剂量规划")
    parser.add_argument("--log-level", default="INFO", help="日志级别")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("config", nargs=None if config_required else "?", help="场景 TOML 文件")
        p.add_argument("--out", help="输出目录（默认 [run].out）")
        p.add_argument("--threads", type=int, help="工作线程数（覆盖 BTE_THREADS）")
        p.add_argument("--tol", type=float, help="源迭代容差")
        p.add_argument("--max-iter", dest="max_iter", type=int, help="源迭代最大次数")
        return p

    common(sub.add_parser("validate-xs", help="次临界条件校验")).set_defaults(func=cmd_validate_xs)
    p = common(sub.add_parser("solve", help="稳态耦合求解"))
    p.add_argument("--full-flux", action="store_true", help="同时写出完整相空间通量")
    p.set_defaults(func=cmd_solve)
    common(sub.add_parser("evolve", help="含时演化")).set_defaults(func=cmd_evolve)
    p = common(sub.add_parser("dose", help="剂量与 DVH"))
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_dose)
    common(sub.add_parser("plan-init", help="初始最优控制（阻尼不动点）")).set_defaults(func=cmd_plan_init)
    p = common(sub.add_parser("optimize", help="投影梯度优化"))
    p.add_argument("--phase", choices=["init", "convex", "dv"], default="convex")
    p.add_argument("--init", help="初始控制 CSV（默认先求初始解）")
    p.set_defaults(func=cmd_optimize)
    p = common(sub.add_parser("probe-regularity", help="球域正则性探针"), config_required=False)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--eps", type=float, nargs="+", default=list(DEFAULT_EPS))
    p.add_argument("--resolution", type=int, default=16)
    p.set_defaults(func=cmd_probe_regularity)
    p = common(sub.add_parser("oracle-mc", help="蒙特卡罗剂量校验"))
    p.add_argument("--seed", type=int)
    p.add_argument("--particles", type=int)
    p.set_defaults(func=cmd_oracle_mc)
    p = sub.add_parser("dump-config", help="规范化并重新序列化场景")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigError as e:
        error_handler.handle_error(e, context={'command': args.command})
        print(f"配置错误: {e.message}", file=sys.stderr)
        return 2
    except Exception as e:
        info = error_handler.handle_error(e, context={'command': args.command})
        print(f"错误 [{info['error_code']}]: {info['message']}", file=sys.stderr)
        return error_handler.exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
