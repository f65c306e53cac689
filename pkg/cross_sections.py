#!/usr/bin/env python3
"""
三粒子截面
总截面 Σⱼ、微分截面 σ_kj（碰撞算子 K 及其伴随 K*）、能量沉积截面 κⱼ，
以及次临界条件校验
"""

import weakref
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from discretization import N_SPECIES, PhaseGrid, check_field
from errors import InputValidationError, NegativeData
from geometry import Region, region_index
from runtime import get_resource_budget

ANGULAR_SHAPES = ("isotropic", "screened")
ENERGY_SHAPES = ("uniform", "elastic", "downscatter")


@dataclass
class Material:
    """单个分区的截面常数（按粒子种类）"""
    sigma_a: np.ndarray
    sigma_s: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        self.sigma_a = np.broadcast_to(np.asarray(self.sigma_a, dtype=float), (N_SPECIES,)).copy()
        self.sigma_s = np.broadcast_to(np.asarray(self.sigma_s, dtype=float), (N_SPECIES,)).copy()
        self.kappa = np.broadcast_to(np.asarray(self.kappa, dtype=float), (N_SPECIES,)).copy()


@dataclass
class Channel:
    """散射/转移通道 k→j：强度（按分区）× 角度形状 × 能量形状"""
    src: int
    dst: int
    strength: np.ndarray
    angular: str = "isotropic"
    g: float = 0.0
    energy: str = "uniform"

    def __post_init__(self):
        if self.angular not in ANGULAR_SHAPES:
            raise InputValidationError(f"未知的角度形状: {self.angular}")
        if self.energy not in ENERGY_SHAPES:
            raise InputValidationError(f"未知的能量形状: {self.energy}")
        if not 0.0 <= self.g < 1.0:
            raise InputValidationError(f"屏蔽前向核要求 g ∈ [0,1)，当前为 {self.g}")
        self.strength = np.asarray(self.strength, dtype=float)


@dataclass
class SubCriticalityReport:
    """次临界条件校验结果"""
    c_row: float
    c_col: float
    C_row: float
    C_col: float
    satisfied: bool
    per_species: Dict[str, List[float]] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, object]:
        return {
            'c_row': self.c_row,
            'c_col': self.c_col,
            'C_row': self.C_row,
            'C_col': self.C_col,
            'satisfied': self.satisfied,
        }


def henyey_greenstein(mu: np.ndarray, g: float) -> np.ndarray:
    """屏蔽前向角度因子 (1−g²)/(1+g²−2gμ)^{3/2}（未归一化）"""
    return (1.0 - g ** 2) / (1.0 + g ** 2 - 2.0 * g * mu) ** 1.5


def angular_matrix(shape: str, g: float, grid: PhaseGrid) -> np.ndarray:
    """A[q_in, q_out]，按网格自身的角度求积逐行归一化"""
    w = grid.angular.weights
    if shape == "isotropic":
        return np.full((len(w), len(w)), 1.0 / w.sum())
    nodes = grid.angular.nodes
    H = henyey_greenstein(np.clip(nodes @ nodes.T, -1.0, 1.0), g)
    return H / (H @ w)[:, None]


def energy_matrix(shape: str, grid: PhaseGrid) -> np.ndarray:
    """B[m_in, m_out]，按能量权重逐行归一化"""
    w = grid.energy.weights
    M = len(w)
    if shape == "uniform":
        return np.full((M, M), 1.0 / w.sum())
    if shape == "elastic":
        return np.diag(1.0 / w)
    lower = np.tril(np.ones((M, M)))
    return lower / (lower @ w)[:, None]


class CollisionOperator:
    """绑定到网格的离散碰撞算子"""

    def __init__(self, xs: "CrossSections", grid: PhaseGrid):
        self.grid = grid
        self.node_region = xs.region_of(grid.spatial.nodes)
        self.channels = []
        for ch in xs.channels:
            A = angular_matrix(ch.angular, ch.g, grid)
            B = energy_matrix(ch.energy, grid)
            self.channels.append((ch, A, B, ch.strength[self.node_region]))
        self.table = xs.table
        if self.table is not None:
            expected = (N_SPECIES, N_SPECIES, grid.angular.size, grid.angular.size,
                        grid.energy.size, grid.energy.size)
            if self.table.shape != expected:
                raise InputValidationError(f"稠密核形状 {self.table.shape} 与网格 {expected} 不匹配")
        self.is_zero = not self.channels and self.table is None

    def _weighted(self, psi: np.ndarray) -> np.ndarray:
        return psi * self.grid.angular.weights[None, :, None] * self.grid.energy.weights[None, None, :]

    def apply(self, psi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(psi)
        for ch, A, B, s in self.channels:
            tmp = self._weighted(psi[ch.src]) @ B
            out[ch.dst] += s[:, None, None] * np.einsum("nab,ac->ncb", tmp, A, optimize=True)
        if self.table is not None:
            pw = psi * self.grid.angular.weights[None, None, :, None] * self.grid.energy.weights
            out += np.einsum("kjabcd,knac->jnbd", self.table, pw, optimize=True)
        return out

    def apply_adjoint(self, phi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(phi)
        for ch, A, B, s in self.channels:
            tmp = self._weighted(phi[ch.dst]) @ B.T
            out[ch.src] += s[:, None, None] * np.einsum("nab,ca->ncb", tmp, A, optimize=True)
        if self.table is not None:
            pw = phi * self.grid.angular.weights[None, None, :, None] * self.grid.energy.weights
            out += np.einsum("kjabcd,jnbd->knac", self.table, pw, optimize=True)
        return out

    def row_integrals(self) -> np.ndarray:
        """∫σ_jk dω′dE′（出射），形状 (3, N, Q, M)"""
        return self._integrals(transpose=False)

    def column_integrals(self) -> np.ndarray:
        """∫σ_kj dω′dE′（入射），形状 (3, N, Q, M)"""
        return self._integrals(transpose=True)

    def _integrals(self, transpose: bool) -> np.ndarray:
        wq = self.grid.angular.weights
        wm = self.grid.energy.weights
        N = len(self.node_region)
        out = np.zeros((N_SPECIES, N, len(wq), len(wm)))
        for ch, A, B, s in self.channels:
            if transpose:
                ang, en, j = wq @ A, wm @ B, ch.dst
            else:
                ang, en, j = A @ wq, B @ wm, ch.src
            out[j] += s[:, None, None] * ang[None, :, None] * en[None, None, :]
        if self.table is not None:
            if transpose:
                t = np.einsum("kjabcd,a,c->jbd", self.table, wq, wm)
            else:
                t = np.einsum("kjabcd,b,d->kac", self.table, wq, wm)
            out += t[:, None, :, :]
        return out


class CrossSections:
    """按分区分段常数的截面族"""

    def __init__(self, regions: Sequence[Region], materials: Sequence[Material],
                 channels: Sequence[Channel] = (), table: Optional[np.ndarray] = None):
        if len(materials) != len(regions) + 1:
            raise InputValidationError("材料数必须等于分区数 + 1（含背景）")
        self.regions = list(regions)
        self.materials = list(materials)
        self.channels = list(channels)
        self.table = None
        if table is not None:
            get_resource_budget().require_dense(np.asarray(table).nbytes, "稠密散射核")
            self.table = np.asarray(table, dtype=float)
        for ch in self.channels:
            if ch.strength.shape != (len(self.materials),):
                ch.strength = np.broadcast_to(ch.strength, (len(self.materials),)).astype(float)
        self._operators = weakref.WeakKeyDictionary()

    @property
    def n_regions(self) -> int:
        return len(self.materials)

    @property
    def sigma_table(self) -> np.ndarray:
        """Σⱼ 按分区，形状 (3, R)：σ_a + 出射通道强度之和（稠密核时加 σ_s）"""
        table = np.stack([m.sigma_a for m in self.materials], axis=1)
        for ch in self.channels:
            table[ch.src] += ch.strength
        if self.table is not None:
            table += np.stack([m.sigma_s for m in self.materials], axis=1)
        return table

    @property
    def kappa_table(self) -> np.ndarray:
        return np.stack([m.kappa for m in self.materials], axis=1)

    @property
    def has_kernel(self) -> bool:
        return bool(self.channels) or self.table is not None

    def region_of(self, X: np.ndarray) -> np.ndarray:
        return region_index(self.regions, X)

    def sigma_at(self, X: np.ndarray) -> np.ndarray:
        """任意点处的 Σⱼ，形状 (3, P)"""
        return self.sigma_table[:, self.region_of(X)]

    def sigma_nodes(self, grid: PhaseGrid) -> np.ndarray:
        return self.sigma_at(grid.spatial.nodes)

    def kappa_nodes(self, grid: PhaseGrid) -> np.ndarray:
        return self.kappa_table[:, self.region_of(grid.spatial.nodes)]

    def uniform_sigma(self) -> Optional[np.ndarray]:
        """Σⱼ 在空间上均匀时返回 (3,)，否则 None"""
        table = self.sigma_table
        if np.all(table == table[:, :1]):
            return table[:, 0].copy()
        return None

    def operator(self, grid: PhaseGrid) -> CollisionOperator:
        op = self._operators.get(grid)
        if op is None:
            op = CollisionOperator(self, grid)
            self._operators[grid] = op
        return op

    def check_nonnegative(self):
        tables = {'Σ': self.sigma_table, 'σ_a': np.stack([m.sigma_a for m in self.materials]),
                  'κ': self.kappa_table}
        for name, values in tables.items():
            if np.any(values < 0):
                raise NegativeData(f"{name} 出现负值", details={'min': float(values.min())})
        for ch in self.channels:
            if np.any(ch.strength < 0):
                raise NegativeData(f"通道 {ch.src}→{ch.dst} 的强度为负")
        if self.table is not None and np.any(self.table < 0):
            raise NegativeData("稠密散射核出现负值")


def validate(xs: CrossSections, grid: PhaseGrid) -> SubCriticalityReport:
    """在每个网格节点上计算 Σⱼ − ∫σ_jk 与 Σⱼ − ∫σ_kj 的下界"""
    xs.check_nonnegative()
    op = xs.operator(grid)
    sigma = xs.sigma_nodes(grid)[:, :, None, None]
    rows = op.row_integrals()
    cols = op.column_integrals()
    row_margin = sigma - rows
    col_margin = sigma - cols
    report = SubCriticalityReport(
        c_row=float(row_margin.min()),
        c_col=float(col_margin.min()),
        C_row=float(rows.max()),
        C_col=float(cols.max()),
        satisfied=bool(row_margin.min() > 0 and col_margin.min() > 0),
        per_species={
            'c_row': [float(row_margin[j].min()) for j in range(N_SPECIES)],
            'c_col': [float(col_margin[j].min()) for j in range(N_SPECIES)],
        },
    )
    level = "info" if report.satisfied else "warning"
    getattr(logger, level)(f"次临界校验: c_row={report.c_row:.6g}, c_col={report.c_col:.6g}, "
                           f"满足={report.satisfied}")
    return report


def apply_collision(xs: CrossSections, psi: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """(Kψ)ⱼ = Σₖ Σ σ_kj ψₖ w_ω′ w_E′"""
    psi = check_field(psi, grid)
    return xs.operator(grid).apply(psi)


def apply_collision_adjoint(xs: CrossSections, phi: np.ndarray, grid: PhaseGrid) -> np.ndarray:
    """(K*φ)ⱼ = Σₖ Σ σ_jk φₖ w_ω′ w_E′；相空间内积下 K 的离散转置"""
    phi = check_field(phi, grid)
    return xs.operator(grid).apply_adjoint(phi)


def toy_isotropic(sigma_a: float, sigma_s: float, kappa: float = 1.0,
                  regions: Sequence[Region] = (), energy: str = "uniform") -> CrossSections:
    """对角各向同性玩具族：Σⱼ = σ_a + σ_s"""
    n = len(regions) + 1
    materials = [Material(sigma_a=sigma_a, sigma_s=sigma_s, kappa=kappa) for _ in range(n)]
    channels = []
    if sigma_s > 0:
        channels = [Channel(src=j, dst=j, strength=np.full(n, sigma_s), energy=energy)
                    for j in range(N_SPECIES)]
    return CrossSections(regions, materials, channels)


def total_cross_section_field(xs: CrossSections, grid: PhaseGrid) -> np.ndarray:
    """Σⱼ(x) 展开到相空间形状 (3, N, Q, M)"""
    return np.broadcast_to(xs.sigma_nodes(grid)[:, :, None, None], grid.shape).copy()


def deposition_field(xs: CrossSections, grid: PhaseGrid) -> np.ndarray:
    """κⱼ(x) 展开到相空间形状 (3, N, Q, M)"""
    return np.broadcast_to(xs.kappa_nodes(grid)[:, :, None, None], grid.shape).copy()


@dataclass
class SpeedScaledSystem:
    """速度缩放系统：Σ̃ⱼ = vⱼ(E)Σⱼ，K̃ = v_接收·K"""
    sigma: np.ndarray
    speeds: np.ndarray
    operator: CollisionOperator

    def apply(self, psi: np.ndarray) -> np.ndarray:
        return self.speeds[:, None, None, :] * self.operator.apply(psi)


def scale_by_speed(xs: CrossSections, speeds: np.ndarray, grid: PhaseGrid) -> SpeedScaledSystem:
    """speeds 形状 (3, M)：各粒子在能量节点上的速率"""
    speeds = np.asarray(speeds, dtype=float)
    if speeds.shape != (N_SPECIES, grid.energy.size):
        raise InputValidationError(f"速率表形状 {speeds.shape} 与能量网格不匹配")
    sigma = xs.sigma_nodes(grid)[:, :, None, None] * speeds[:, None, None, :]
    return SpeedScaledSystem(sigma=sigma, speeds=speeds, operator=xs.operator(grid))
