#!/usr/bin/env python3
"""
稳态输运求解
特征线衰减扫描、入流数据提升 L、迹、预解式、耦合源迭代、伴随求解、初级/次级分解
"""

import weakref
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from cross_sections import CrossSections, validate
from discretization import N_SPECIES, AnalyticField, PhaseGrid, boundary_zeros, check_field
from errors import AsymmetricGrid, NoConvergence, NonPositiveLambda
from geometry import Region, region_index
from runtime import get_resource_budget, parallel_map

SERIES_THRESHOLD = 1e-4
TRACE_NUDGE = 1e-6


class SolveOptions(BaseModel):
    """特征线积分与源迭代参数"""
    model_config = ConfigDict(extra="forbid")

    ray_step: Optional[float] = Field(default=None, gt=0)
    tol: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=500, ge=1)
    damping: float = Field(default=1.0, gt=0, le=1)
    threads: int = Field(default=1, ge=1)
    cache: str = Field(default="auto", pattern="^(auto|always|never)$")


@dataclass
class SolveReport:
    """源迭代报告"""
    iterations: int = 0
    residual: float = 0.0
    contraction: float = 0.0
    history: List[float] = field(default_factory=list)
    guaranteed: bool = True
    converged: bool = True

    def as_dict(self) -> Dict[str, object]:
        return {
            'iterations': self.iterations,
            'residual': self.residual,
            'contraction': self.contraction,
            'guaranteed': self.guaranteed,
            'converged': self.converged,
        }


@dataclass
class SolveResult:
    psi: np.ndarray
    report: SolveReport


@dataclass
class BoundaryTrace:
    """边界迹值（另一侧为零）及其 |ω·ν| 权重"""
    values: np.ndarray
    weights: np.ndarray
    side: str

    def norm(self, p: int = 1) -> float:
        per_species = np.sum(np.abs(self.values) ** p * self.weights[None], axis=(1, 2, 3)) ** (1.0 / p)
        return float(np.sum(per_species ** p) ** (1.0 / p))


class Attenuation:
    """沿射线的 Σⱼ：分区常数表 (3, R) 与分区几何"""

    def __init__(self, table: np.ndarray, regions: Sequence[Region] = ()):
        self.table = np.asarray(table, dtype=float)
        self.regions = tuple(regions)
        if self.table.shape != (N_SPECIES, len(self.regions) + 1):
            raise ValueError(f"截面表形状 {self.table.shape} 与分区数不匹配")
        # 相同 Σ 的粒子共享特征线矩阵
        self.groups: List[List[int]] = []
        for j in range(N_SPECIES):
            for grp in self.groups:
                if np.array_equal(self.table[grp[0]], self.table[j]):
                    grp.append(j)
                    break
            else:
                self.groups.append([j])

    @classmethod
    def of(cls, sigma: Union["Attenuation", CrossSections, float, Sequence[float]]) -> "Attenuation":
        if isinstance(sigma, Attenuation):
            return sigma
        if isinstance(sigma, CrossSections):
            return cls(sigma.sigma_table, sigma.regions)
        values = np.broadcast_to(np.asarray(sigma, dtype=float), (N_SPECIES,))
        return cls(values[:, None].copy())

    @property
    def key(self) -> Tuple:
        return (self.table.tobytes(), self.regions)

    def uniform(self) -> Optional[np.ndarray]:
        if np.all(self.table == self.table[:, :1]):
            return self.table[:, 0].copy()
        return None

    def at(self, X: np.ndarray) -> np.ndarray:
        if self.table.shape[1] == 1:
            return np.repeat(self.table, len(X), axis=1)
        return self.table[:, region_index(self.regions, X)]


def interval_weights(delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """∫₀¹ e^{−δv}(1−v) dv 与 ∫₀¹ e^{−δv} v dv"""
    small = delta < SERIES_THRESHOLD
    d = np.where(small, 1.0, delta)
    em1 = np.expm1(-d)
    a = np.where(small, 0.5 - delta / 6.0 + delta ** 2 / 24.0, (d + em1) / d ** 2)
    b = np.where(small, 0.5 - delta / 3.0 + delta ** 2 / 8.0, (-em1 - d * np.exp(-d)) / d ** 2)
    return a, b


@dataclass
class _RayGeometry:
    t: np.ndarray
    b_idx: np.ndarray


@dataclass
class _DirectionBlock:
    matrices: List[sp.csr_matrix]
    attenuation: List[np.ndarray]

    @property
    def nbytes(self) -> int:
        return sum(m.data.nbytes + m.indices.nbytes + m.indptr.nbytes for m in self.matrices)


class CharacteristicOperator:
    """长特征线算子：每个方向一个稀疏矩阵（节点源 → 节点通量）"""

    def __init__(self, grid: PhaseGrid, attenuation: Attenuation, ray_step: float,
                 threads: int = 1, cache: str = "auto"):
        self.grid = grid
        self.attenuation = attenuation
        self.ray_step = ray_step
        self.threads = threads
        self.cache_mode = cache
        self._geometry: Dict[int, _RayGeometry] = {}
        self._blocks: Dict[int, _DirectionBlock] = {}
        self._cache_enabled: Optional[bool] = None if cache == "auto" else cache == "always"
        self._bq: Dict[int, sp.csr_matrix] = {}

    # --- 射线几何 ---

    def geometry(self, q: int) -> _RayGeometry:
        geo = self._geometry.get(q)
        if geo is None:
            grid = self.grid
            X = grid.spatial.nodes
            omega = np.broadcast_to(grid.angular.nodes[q], X.shape)
            t = grid.domain.escape_times(X, omega)
            Y = X - t[:, None] * omega
            normals = grid.domain.exit_normals(X, omega)
            geo = _RayGeometry(t=t, b_idx=grid.boundary.locate(Y, normals))
            self._geometry[q] = geo
        return geo

    def _build(self, q: int) -> _DirectionBlock:
        grid = self.grid
        X = grid.spatial.nodes
        N = len(X)
        omega = grid.angular.nodes[q]
        t = self.geometry(q).t
        L = np.maximum(1, np.ceil(t / self.ray_step).astype(np.int64))
        counts = L + 1
        total = int(counts.sum())
        ray = np.repeat(np.arange(N), counts)
        start = np.cumsum(counts) - counts
        start_rep = np.repeat(start, counts)
        l = np.arange(total) - start_rep
        ds = (t / L)[ray]
        P = X[ray] - (l * ds)[:, None] * omega
        idx, w = grid.spatial.stencil(P, "nearest")
        sig_all = self.attenuation.at(P)
        has_next = l < L[ray]
        last = start + L
        rows = np.repeat(ray, 8)
        cols = idx.ravel()

        matrices, attenuation = [], []
        for grp in self.attenuation.groups:
            sig = sig_all[grp[0]]
            inc = 0.5 * (sig[1:] + sig[:-1]) * ds[1:]
            inc[l[1:] == 0] = 0.0
            cum = np.concatenate([[0.0], np.cumsum(inc)])
            tau = cum - cum[start_rep]
            delta = np.zeros(total)
            delta[:-1] = tau[1:] - tau[:-1]
            delta[~has_next] = 0.0
            a, b = interval_weights(delta)
            e = np.exp(-tau)
            coef = np.where(has_next, ds * e * a, 0.0)
            right = np.where(has_next, ds * e * b, 0.0)
            coef[1:] += right[:-1]
            vals = (coef[:, None] * w).ravel()
            mat = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
            mat.sum_duplicates()
            matrices.append(mat)
            attenuation.append(e[last])
        return _DirectionBlock(matrices=matrices, attenuation=attenuation)

    def block(self, q: int) -> _DirectionBlock:
        blk = self._blocks.get(q)
        if blk is not None:
            return blk
        blk = self._build(q)
        if self._cache_enabled is None:
            required_mb = blk.nbytes * self.grid.angular.size / 1024 / 1024
            self._cache_enabled = get_resource_budget().is_memory_available(required_mb)
            if not self._cache_enabled:
                logger.warning(f"特征线矩阵约需 {required_mb:.0f}MB，内存不足，改为逐次重建")
        if self._cache_enabled:
            self._blocks[q] = blk
        return blk

    # --- 正向 ---

    def sweep(self, source: Optional[np.ndarray], g: Optional[np.ndarray]) -> np.ndarray:
        """ψ = A·source + B·g（逐方向）"""
        grid = self.grid
        psi = np.zeros(grid.shape)
        uniform = self.attenuation.uniform()
        closed_form = (uniform is not None and
                       (source is None or np.all(source == source[:, :1, :, :])))

        def run(q: int):
            geo = self.geometry(q)
            if closed_form:
                for j in range(N_SPECIES):
                    sig = uniform[j]
                    if source is not None:
                        if sig > 0:
                            factor = -np.expm1(-sig * geo.t) / sig
                        else:
                            factor = geo.t
                        psi[j, :, q, :] = factor[:, None] * source[j, 0, q, :][None, :]
                    if g is not None:
                        psi[j, :, q, :] += np.exp(-sig * geo.t)[:, None] * g[j, geo.b_idx, q, :]
                return
            blk = self.block(q)
            for grp, mat, att in zip(self.attenuation.groups, blk.matrices, blk.attenuation):
                for j in grp:
                    if source is not None:
                        psi[j, :, q, :] = mat @ source[j, :, q, :]
                    if g is not None:
                        psi[j, :, q, :] += att[:, None] * g[j, geo.b_idx, q, :]

        parallel_map(run, range(grid.angular.size), self.threads)
        return psi

    def lift(self, g: np.ndarray) -> np.ndarray:
        """(Lg)(x,ω,E) = g(x − t(x,ω)ω, ω, E)"""
        psi = np.zeros(self.grid.shape)
        for q in range(self.grid.angular.size):
            psi[:, :, q, :] = g[:, self.geometry(q).b_idx, q, :]
        return psi

    # --- 转置（相空间内积意义下） ---

    def sweep_transpose(self, source: np.ndarray) -> np.ndarray:
        """A† = W⁻¹AᵀW"""
        grid = self.grid
        vol = grid.spatial.cell_volumes[:, None]
        out = np.zeros(grid.shape)

        def run(q: int):
            blk = self.block(q)
            for grp, mat in zip(self.attenuation.groups, blk.matrices):
                for j in grp:
                    out[j, :, q, :] = (mat.T @ (vol * source[j, :, q, :])) / vol

        parallel_map(run, range(grid.angular.size), self.threads)
        return out

    def boundary_transpose(self, phi: np.ndarray) -> np.ndarray:
        """B‡ = W_b⁻¹BᵀW：相空间场 → 入流边界值"""
        grid = self.grid
        b = grid.boundary
        vol = grid.spatial.cell_volumes
        out = boundary_zeros(grid)
        N = grid.spatial.size
        for q in range(grid.angular.size):
            geo = self.geometry(q)
            blk = self.block(q)
            denom = b.areas * np.abs(b.mu[:, q])
            inflow = b.inflow[:, q]
            scale = np.where(inflow, 1.0 / np.where(inflow, denom, 1.0), 0.0)
            for grp, att in zip(self.attenuation.groups, blk.attenuation):
                Bq = sp.csr_matrix((att * vol, (geo.b_idx, np.arange(N))), shape=(b.size, N))
                for j in grp:
                    out[j, :, q, :] = scale[:, None] * (Bq @ phi[j, :, q, :])
        return out


_OPERATORS: "weakref.WeakKeyDictionary[PhaseGrid, Dict[Tuple, CharacteristicOperator]]" = weakref.WeakKeyDictionary()


def characteristic_operator(grid: PhaseGrid, sigma, opts: Optional[SolveOptions] = None) -> CharacteristicOperator:
    """按 (网格, Σ, 步长) 缓存的特征线算子"""
    opts = opts or SolveOptions()
    attenuation = Attenuation.of(sigma)
    ray_step = opts.ray_step or 0.5 * grid.spatial.spacing
    per_grid = _OPERATORS.setdefault(grid, {})
    key = (attenuation.key, ray_step, opts.cache)
    op = per_grid.get(key)
    if op is None:
        op = CharacteristicOperator(grid, attenuation, ray_step, opts.threads, opts.cache)
        per_grid[key] = op
    op.threads = opts.threads
    return op


def _norm1(field: np.ndarray, grid: PhaseGrid) -> float:
    return float(np.sum(np.abs(field) * grid.volume_weights[None]))


# === 公开操作 ===

def lift(g: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """入流数据沿特征线的常值延拓"""
    g = check_field(g, grid, boundary=True)
    return characteristic_operator(grid, 0.0).lift(g)


def trace(psi: np.ndarray, grid: PhaseGrid, side: str = "outflow") -> BoundaryTrace:
    """在 y − 10⁻⁶·d·ν 处插值得到边界迹"""
    psi = check_field(psi, grid)
    b = grid.boundary
    Y = b.points - TRACE_NUDGE * grid.domain.diameter * b.normals
    interp = grid.spatial.interpolation_matrix(Y, extension="nearest")
    mask = b.mask(side)
    values = np.zeros(grid.boundary_shape)
    for j in range(N_SPECIES):
        for m in range(grid.energy.size):
            values[j, :, :, m] = (interp @ psi[j, :, :, m]) * mask
    return BoundaryTrace(values=values, weights=grid.boundary_weights(side), side=side)


def sweep_attenuated(sigma, f: Optional[np.ndarray], g: Optional[np.ndarray], grid: PhaseGrid,
                     opts: Optional[SolveOptions] = None) -> np.ndarray:
    """无耦合的衰减特征线解"""
    if f is not None:
        f = check_field(f, grid)
    if g is not None:
        g = check_field(g, grid, boundary=True)
    attenuation = Attenuation.of(sigma)
    if np.any(attenuation.table < 0):
        raise ValueError("Σ 必须非负")
    return characteristic_operator(grid, attenuation, opts).sweep(f, g)


def constant_solution(sigma, value, grid: PhaseGrid) -> np.ndarray:
    """Σ 与源在空间上均匀、g = 0 时的精确解 q(1 − e^{−Σt})/Σ（Σ = 0 时为 q·t）"""
    uniform = Attenuation.of(sigma).uniform()
    if uniform is None:
        raise ValueError("闭式解要求 Σ 在空间上均匀")
    value = np.broadcast_to(np.asarray(value, dtype=float), (N_SPECIES,))
    X = grid.spatial.nodes
    psi = np.zeros(grid.shape)
    for q, omega in enumerate(grid.angular.nodes):
        t = grid.domain.escape_times(X, np.broadcast_to(omega, X.shape))
        for j in range(N_SPECIES):
            sig = uniform[j]
            factor = -np.expm1(-sig * t) / sig if sig > 0 else t
            psi[j, :, q, :] = (value[j] * factor)[:, None]
    return psi


def resolvent_convection(lam: float, f: np.ndarray, grid: PhaseGrid,
                         opts: Optional[SolveOptions] = None) -> np.ndarray:
    """(λI − A₀)⁻¹f = ∫₀^{t} f(x−sω) e^{−λs} ds"""
    if lam <= 0:
        raise NonPositiveLambda(f"λ 必须为正，当前为 {lam}")
    return sweep_attenuated(float(lam), f, None, grid, opts)


def _source_iteration(step: Callable[[np.ndarray], np.ndarray], first: np.ndarray, grid: PhaseGrid,
                      opts: SolveOptions, label: str, guaranteed: bool) -> SolveResult:
    report = SolveReport(guaranteed=guaranteed)
    psi = first
    prev_diff = None
    for it in range(1, opts.max_iter + 1):
        new = step(psi)
        if opts.damping < 1.0:
            new = (1.0 - opts.damping) * psi + opts.damping * new
        diff = _norm1(new - psi, grid)
        scale = _norm1(new, grid)
        change = diff / scale if scale > 0 else 0.0
        if prev_diff:
            report.contraction = diff / prev_diff
        prev_diff = diff
        psi = new
        report.history.append(change)
        report.iterations = it
        logger.debug(f"{label} 迭代 {it}: 相对变化 {change:.3e}")
        if change < opts.tol:
            residual = _norm1(psi - step(psi), grid) / scale if scale > 0 else 0.0
            report.residual = residual
            if residual < 10 * opts.tol:
                logger.info(f"{label}收敛: 迭代 {it} 次, 残差 {residual:.3e}, 收缩比 {report.contraction:.4f}")
                return SolveResult(psi=psi, report=report)
    report.converged = False
    raise NoConvergence(
        f"{label}在 {opts.max_iter} 次迭代内未收敛",
        details={'history_tail': report.history[-5:], 'guaranteed': guaranteed,
                 'hint': '可减小阻尼 θ 或检查次临界条件'}
    )


def solve_coupled(xs: CrossSections, f: Optional[np.ndarray], g: Optional[np.ndarray], grid: PhaseGrid,
                  opts: Optional[SolveOptions] = None) -> SolveResult:
    """源迭代：ψⁿ⁺¹ = Sweep(Σ, f + Kψⁿ, g)"""
    opts = opts or SolveOptions()
    f = check_field(f, grid) if f is not None else np.zeros(grid.shape)
    if g is not None:
        g = check_field(g, grid, boundary=True)
    report = validate(xs, grid)
    if not report.satisfied:
        logger.warning("次临界条件不满足：无收缩保证，继续迭代")
    op = characteristic_operator(grid, xs, opts)
    K = xs.operator(grid)
    first = op.sweep(f, g)
    if K.is_zero:
        return SolveResult(psi=first, report=SolveReport(iterations=1, guaranteed=report.satisfied))
    return _source_iteration(lambda psi: op.sweep(f + K.apply(psi), g), first, grid, opts,
                             "源迭代", report.satisfied)


def decompose_primary_secondary(xs: CrossSections, f: Optional[np.ndarray], g: Optional[np.ndarray],
                                grid: PhaseGrid, opts: Optional[SolveOptions] = None
                                ) -> Tuple[np.ndarray, np.ndarray]:
    """u：未碰撞初级粒子；w：由 Ku 驱动的次级粒子"""
    opts = opts or SolveOptions()
    u = sweep_attenuated(xs, f, g, grid, opts)
    K = xs.operator(grid)
    if K.is_zero:
        return u, np.zeros_like(u)
    w = solve_coupled(xs, K.apply(u), None, grid, opts).psi
    return u, w


def solve_adjoint(xs: CrossSections, f_star: np.ndarray, grid: PhaseGrid,
                  opts: Optional[SolveOptions] = None, method: str = "transpose") -> SolveResult:
    """(−ω·∇ + Σ − K*)ψ* = f*，出流边界 ψ* = 0"""
    opts = opts or SolveOptions()
    f_star = check_field(f_star, grid)
    guaranteed = validate(xs, grid).satisfied
    op = characteristic_operator(grid, xs, opts)
    K = xs.operator(grid)
    if method == "transpose":
        first = op.sweep_transpose(f_star)
        if K.is_zero:
            return SolveResult(psi=first, report=SolveReport(iterations=1, guaranteed=guaranteed))
        return _source_iteration(lambda phi: op.sweep_transpose(f_star + K.apply_adjoint(phi)),
                                 first, grid, opts, "伴随源迭代", guaranteed)
    if method == "reversal":
        anti = grid.angular.antipode
        if anti is None:
            raise AsymmetricGrid("角度求积不满足对径闭合（方位角数需为偶数）")
        # φ(x,ω) = ψ*(x,−ω) 满足正向形式的问题
        f_hat = f_star[:, :, anti, :]
        first = op.sweep(f_hat, None)
        if K.is_zero:
            return SolveResult(psi=first[:, :, anti, :],
                               report=SolveReport(iterations=1, guaranteed=guaranteed))
        step = lambda phi: op.sweep(f_hat + K.apply_adjoint(phi[:, :, anti, :])[:, :, anti, :], None)
        result = _source_iteration(step, first, grid, opts, "反向伴随源迭代", guaranteed)
        return SolveResult(psi=result.psi[:, :, anti, :], report=result.report)
    raise ValueError(f"未知的伴随方法: {method}")


def adjoint_inflow_trace(psi_star: np.ndarray, f_star: np.ndarray, xs: CrossSections, grid: PhaseGrid,
                         opts: Optional[SolveOptions] = None) -> np.ndarray:
    """γ₋ψ*：与离散正向映射一致的入流迹"""
    op = characteristic_operator(grid, xs, opts)
    K = xs.operator(grid)
    source = f_star if K.is_zero else f_star + K.apply_adjoint(psi_star)
    return op.boundary_transpose(source)


def green_residual(psi: np.ndarray, f: np.ndarray, sigma, v: AnalyticField, grid: PhaseGrid) -> float:
    """由扫描解检验 ∫(ω·∇ψ)v + ∫(ω·∇v)ψ = ∮(ω·ν)ψv，ω·∇ψ 取 f − Σψ"""
    X = grid.spatial.nodes
    W = grid.angular.nodes
    E = grid.energy.nodes
    sig = Attenuation.of(sigma).at(X)
    v_val, v_dir = v.evaluate(X, W, E)
    stream = f - sig[:, :, None, None] * psi
    lhs = float(np.sum((stream * v_val[None] + v_dir[None] * psi) * grid.volume_weights[None]))
    b = grid.boundary
    signed = (b.areas[:, None] * b.mu * grid.angular.weights[None, :])[:, :, None] * grid.energy.weights
    trace_all = trace(psi, grid, "outflow").values + trace(psi, grid, "inflow").values
    vb, _ = v.evaluate(b.points, W, E)
    rhs = float(np.sum(signed[None] * trace_all * vb[None]))
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1.0)
