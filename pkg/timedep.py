#!/usr/bin/env python3
"""
含时输运
Trotter 分裂（碰撞指数级数 → 逐点衰减 → 速度缩放的自由流动）、
Duhamel 中点源项、推迟边界显式解与时间误差研究
"""

import weakref
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from loguru import logger

from cross_sections import CrossSections, scale_by_speed
from discretization import N_SPECIES, PhaseGrid, check_field, integrate_phase
from errors import HasKernel, InputValidationError, SeriesDivergence
from transport import Attenuation, characteristic_operator, lift, trace

SERIES_TOL = 1e-8
DEFAULT_SERIES_ORDER = 12
COMPATIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class SpeciesKinematics:
    """各粒子质量；速率 v = √(2E/m)"""
    masses: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        masses = tuple(float(m) for m in self.masses)
        if len(masses) != N_SPECIES or min(masses) <= 0:
            raise InputValidationError(f"质量必须为 3 个正数: {self.masses}")
        object.__setattr__(self, "masses", masses)

    def speed(self, E, j: int):
        return np.sqrt(2.0 * np.asarray(E, dtype=float) / self.masses[j])

    def speeds(self, grid: PhaseGrid) -> np.ndarray:
        """能量节点上的速率表 (3, M)"""
        if grid.energy.e0 <= 0:
            raise InputValidationError("含时计算要求 E0 > 0")
        return np.stack([self.speed(grid.energy.nodes, j) for j in range(N_SPECIES)])


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 1:
            raise InputValidationError(f"时间网格无效: T={self.T}, n_steps={self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


def constant_profile(t):
    return np.ones_like(np.asarray(t, dtype=float))


def ramp_profile(t):
    return np.maximum(np.asarray(t, dtype=float), 0.0)


PROFILES: Dict[str, Callable] = {
    'constant': constant_profile,
    'ramp': ramp_profile,
}


@dataclass
class BoundaryHistory:
    """分离变量的入流边界历史 g(y,ω,E,t) = base(y,ω,E)·profile(t)"""
    base: np.ndarray
    profile: Union[str, Callable] = "constant"

    def __post_init__(self):
        if isinstance(self.profile, str):
            if self.profile not in PROFILES:
                raise InputValidationError(f"未知的时间剖面: {self.profile}")
            self.profile = PROFILES[self.profile]

    def at(self, t: float) -> np.ndarray:
        return self.base * float(self.profile(np.asarray(t)))


@dataclass
class Trajectory:
    """按时间网格采样的解序列与逐步质量记录"""
    times: np.ndarray
    states: List[np.ndarray]
    mass: List[float] = field(default_factory=list)
    streaming_loss: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


class StreamingOperator:
    """半拉格朗日平移 ψ(x) ← H(t(x,ω) − vΔt)·ψ(x − vΔtω)，格外零延拓"""

    def __init__(self, grid: PhaseGrid, speeds: np.ndarray, dt: float):
        self.grid = grid
        self.shifts = np.asarray(speeds, dtype=float) * dt
        self.identity = dt == 0
        self._matrices: Dict[Tuple[int, float], sp.csr_matrix] = {}

    def matrix(self, q: int, shift: float) -> sp.csr_matrix:
        key = (q, float(shift))
        mat = self._matrices.get(key)
        if mat is None:
            grid = self.grid
            X = grid.spatial.nodes
            omega = grid.angular.nodes[q]
            t = characteristic_operator(grid, 0.0).geometry(q).t
            P = X - shift * omega
            idx, w = grid.spatial.stencil(P, "zero")
            layer = np.any((idx < 0) & (w > 0), axis=1)
            if layer.any():
                # 边界层：最近值延拓，再按剩余路程 t − vΔt 与插值逃逸时间之比缩放
                near_idx, near_w = grid.spatial.stencil(P[layer], "nearest")
                t_bar = np.sum(near_w * t[near_idx], axis=1)
                scale = np.clip((t[layer] - shift) / np.maximum(t_bar, 1e-300), 0.0, 1.0)
                idx[layer] = near_idx
                w[layer] = near_w * scale[:, None]
            w = np.where((shift < t)[:, None], w, 0.0)
            rows = np.repeat(np.arange(len(X)), 8)
            cols = idx.ravel()
            vals = w.ravel()
            keep = (cols >= 0) & (vals != 0.0)
            mat = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(len(X), len(X)))
            self._matrices[key] = mat
        return mat

    def apply(self, psi: np.ndarray) -> np.ndarray:
        if self.identity:
            return psi.copy()
        out = np.zeros_like(psi)
        for q in range(self.grid.angular.size):
            for j in range(N_SPECIES):
                for m in range(self.grid.energy.size):
                    out[j, :, q, m] = self.matrix(q, self.shifts[j, m]) @ psi[j, :, q, m]
        return out


_STREAMING: "weakref.WeakKeyDictionary[PhaseGrid, Dict]" = weakref.WeakKeyDictionary()


def streaming_operator(grid: PhaseGrid, speeds: np.ndarray, dt: float) -> StreamingOperator:
    per_grid = _STREAMING.setdefault(grid, {})
    key = (np.asarray(speeds, dtype=float).tobytes(), float(dt))
    op = per_grid.get(key)
    if op is None:
        op = StreamingOperator(grid, speeds, dt)
        per_grid.clear()
        per_grid[key] = op
    return op


def free_streaming_step(psi: np.ndarray, dt: float, kin: SpeciesKinematics, grid: PhaseGrid) -> np.ndarray:
    """速度缩放的自由流动 T(Δt)"""
    if dt < 0:
        raise InputValidationError(f"Δt 必须非负: {dt}")
    psi = check_field(psi, grid)
    return streaming_operator(grid, kin.speeds(grid), dt).apply(psi)


def collision_exponential(psi: np.ndarray, dt: float, system, n0: int) -> np.ndarray:
    """截断级数 Σ_{k≤N₀}(ΔtK̃)ᵏψ/k!"""
    if n0 < 1:
        raise InputValidationError(f"级数阶数 N₀ 必须 ≥ 1: {n0}")
    total = psi.copy()
    term = psi
    for k in range(1, n0 + 1):
        term = dt * system.apply(term) / k
        total += term
    scale = float(np.max(np.abs(psi)))
    tail = float(np.max(np.abs(term)))
    if scale > 0 and tail > SERIES_TOL * scale:
        raise SeriesDivergence(
            f"碰撞指数级数截断误差过大 ({tail:.3e})，请减小 Δt 或提高 N₀",
            details={'dt': dt, 'n0': n0, 'tail': tail}
        )
    return total


def trotter_step(psi: np.ndarray, dt: float, xs: CrossSections, kin: SpeciesKinematics, grid: PhaseGrid,
                 n0: int = DEFAULT_SERIES_ORDER) -> np.ndarray:
    """T(Δt)·T_{−Σ}(Δt)·T_K(Δt)"""
    if dt <= 0:
        raise InputValidationError(f"Δt 必须为正: {dt}")
    psi = check_field(psi, grid)
    speeds = kin.speeds(grid)
    system = scale_by_speed(xs, speeds, grid)
    out = psi if system.operator.is_zero else collision_exponential(psi, dt, system, n0)
    out = out * np.exp(-dt * system.sigma)
    return streaming_operator(grid, speeds, dt).apply(out)


def _species_attenuation(op, q: int) -> List[np.ndarray]:
    """每个粒子从节点到入流边界的 e^{−∫Σ}"""
    uniform = op.attenuation.uniform()
    geo = op.geometry(q)
    if uniform is not None:
        return [np.exp(-uniform[j] * geo.t) for j in range(N_SPECIES)]
    blk = op.block(q)
    out: List[Optional[np.ndarray]] = [None] * N_SPECIES
    for grp, att in zip(op.attenuation.groups, blk.attenuation):
        for j in grp:
            out[j] = att
    return out


def _retarded_boundary(history: BoundaryHistory, t: float, speeds: np.ndarray, op, grid: PhaseGrid,
                       window: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """推迟边界值 H(t − t(x,ω)/v)·g(y, t − t(x,ω)/v)·e^{−∫Σ}；window 限定到达时间"""
    values = np.zeros(grid.shape)
    mask = np.zeros(grid.shape, dtype=bool)
    for q in range(grid.angular.size):
        geo = op.geometry(q)
        att = _species_attenuation(op, q)
        for j in range(N_SPECIES):
            delay = geo.t[:, None] / speeds[j][None, :]
            arrived = delay <= t
            if window is not None:
                arrived &= delay <= window
            retarded = np.asarray(history.profile(t - delay), dtype=float)
            base = history.base[j][geo.b_idx, q, :]
            values[j, :, q, :] = np.where(arrived, base * retarded * att[j][:, None], 0.0)
            mask[j, :, q, :] = arrived
    return values, mask


def explicit_boundary_solution(g: BoundaryHistory, t: float, kin: SpeciesKinematics, sigma,
                               grid: PhaseGrid) -> np.ndarray:
    """无碰撞核时的推迟边界解"""
    if isinstance(sigma, CrossSections) and sigma.has_kernel:
        raise HasKernel("显式边界解只适用于无碰撞核的配置")
    check_field(g.base, grid, boundary=True)
    op = characteristic_operator(grid, Attenuation.of(sigma))
    values, _ = _retarded_boundary(g, t, kin.speeds(grid), op, grid)
    return values


def _as_history(g, grid: PhaseGrid) -> Optional[BoundaryHistory]:
    if g is None or isinstance(g, BoundaryHistory):
        return g
    return BoundaryHistory(base=check_field(g, grid, boundary=True))


def _source_at(f, t: float, grid: PhaseGrid) -> Optional[np.ndarray]:
    if f is None:
        return None
    value = f(t) if callable(f) else f
    return check_field(value, grid)


def evolve(psi0: np.ndarray, f, g, tg: TimeGrid, xs: CrossSections, kin: SpeciesKinematics, grid: PhaseGrid,
           n0: int = DEFAULT_SERIES_ORDER, boundary_coupling: str = "inflow") -> Trajectory:
    """ψ(t) = G̃(t)ψ₀ + ∫G̃(t−s)f̃(s)ds，逐步 Trotter + 中点源项"""
    psi0 = check_field(psi0, grid)
    history = _as_history(g, grid)
    if boundary_coupling not in ("inflow", "lift"):
        raise InputValidationError(f"未知的边界耦合方式: {boundary_coupling}")

    dt = tg.dt
    speeds = kin.speeds(grid)
    system = scale_by_speed(xs, speeds, grid)
    v = speeds[:, None, None, :]
    stream = streaming_operator(grid, speeds, dt)
    half_stream = StreamingOperator(grid, speeds, 0.5 * dt)
    decay = np.exp(-dt * system.sigma)
    half_decay = np.exp(-0.5 * dt * system.sigma)
    op = characteristic_operator(grid, xs)

    if history is not None:
        g0 = history.at(0.0)
        mismatch = trace(psi0, grid, "inflow").values - g0 * grid.boundary.inflow[None, :, :, None]
        gap = float(np.sum(np.abs(mismatch) * grid.boundary_weights("inflow")[None]))
        if gap > COMPATIBILITY_TOL * max(1.0, float(np.sum(np.abs(g0) * grid.boundary_weights("inflow")[None]))):
            logger.warning(f"初值与入流数据不相容: 差异 {gap:.3e}（按温和解继续）")

    def advance(state: np.ndarray) -> Tuple[np.ndarray, float]:
        out = state if system.operator.is_zero else collision_exponential(state, dt, system, n0)
        out = out * decay
        streamed = stream.apply(out)
        loss = float(np.sum(np.abs(out) * grid.volume_weights[None]) -
                     np.sum(np.abs(streamed) * grid.volume_weights[None]))
        return streamed, loss

    def midpoint_source(source: np.ndarray) -> np.ndarray:
        return dt * half_stream.apply(half_decay * source)

    times = tg.times
    if boundary_coupling == "lift" and history is not None:
        lift_at = lambda t: lift(history.at(t), grid)
        state = psi0 - lift_at(0.0)
    else:
        lift_at = None
        state = psi0.copy()

    states = [psi0.copy()]
    traj = Trajectory(times=times, states=states, mass=[integrate_phase(psi0, grid)])
    for n in range(tg.n_steps):
        t_mid = times[n] + 0.5 * dt
        state, loss = advance(state)
        source = _source_at(f, t_mid, grid)
        drive = v * source if source is not None else None
        if lift_at is not None:
            lg_mid = lift_at(t_mid)
            # u = ψ − Lg: 源项 K̃Lg − Σ̃Lg − ∂ₜLg（ω·∇Lg = 0）
            extra = system.apply(lg_mid) - system.sigma * lg_mid
            extra -= (lift_at(times[n + 1]) - lift_at(times[n])) / dt
            drive = extra if drive is None else drive + extra
        if drive is not None:
            state = state + midpoint_source(drive)
        if lift_at is not None:
            psi = state + lift_at(times[n + 1])
        else:
            psi = state
            if history is not None:
                injected, mask = _retarded_boundary(history, times[n + 1], speeds, op, grid, window=dt)
                psi = np.where(mask, injected, psi)
                state = psi
        states.append(psi)
        traj.mass.append(integrate_phase(psi, grid))
        traj.streaming_loss.append(loss)
        logger.debug(f"时间步 {n + 1}/{tg.n_steps}: t={times[n + 1]:.4g}, ‖ψ‖₁={traj.mass[-1]:.6e}")

    logger.info(f"含时演化完成: {tg.n_steps} 步, Δt={dt:.4g}, 最终 ‖ψ‖₁={traj.mass[-1]:.6e}")
    return traj


@dataclass
class TimeErrorStudy:
    dts: List[float]
    errors: List[float]
    orders: List[float]


def time_error_study(g: BoundaryHistory, T: float, step_counts: Sequence[int], xs, kin: SpeciesKinematics,
                     grid: PhaseGrid, boundary_coupling: str = "lift") -> TimeErrorStudy:
    """无碰撞核边界驱动问题：相对 L¹ 误差随 Δt 的变化及观测阶"""
    if isinstance(xs, CrossSections) and xs.has_kernel:
        raise HasKernel("时间误差研究需要无碰撞核的配置")
    exact = explicit_boundary_solution(g, T, kin, xs, grid)
    scale = integrate_phase(exact, grid)
    dts, errors = [], []
    for n in step_counts:
        tg = TimeGrid(T=T, n_steps=int(n))
        traj = evolve(np.zeros(grid.shape), None, g, tg, xs, kin, grid, boundary_coupling=boundary_coupling)
        err = integrate_phase(traj.final - exact, grid) / (scale if scale > 0 else 1.0)
        dts.append(tg.dt)
        errors.append(err)
        logger.info(f"时间误差研究: n={n}, Δt={tg.dt:.4g}, 相对误差 {err:.4e}")
    orders = [float(np.log(errors[k] / errors[k + 1]) / np.log(dts[k] / dts[k + 1]))
              if errors[k + 1] > 0 and errors[k] > 0 else float("nan")
              for k in range(len(errors) - 1)]
    return TimeErrorStudy(dts=dts, errors=errors, orders=orders)
