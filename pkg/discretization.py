#!/usr/bin/env python3
"""
相空间离散化
G×S×I 上的张量积网格、入流/出流边界求积（|ω·ν| 测度）、三线性插值与相空间范数
"""

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from loguru import logger
from scipy import ndimage

from errors import BadExponent, EmptyGrid, ShapeMismatch
from geometry import TANGENT_TOL, Ball, Box, Domain

N_SPECIES = 3
SPECIES = ("photon", "electron", "positron")
VOLUME_SUBSAMPLES = 4


@dataclass(frozen=True)
class AngularQuadrature:
    """Gauss–Legendre(cosθ) × 均匀方位角 的乘积求积"""
    nodes: np.ndarray
    weights: np.ndarray
    n_polar: int
    n_azimuth: int
    antipode: Optional[np.ndarray]

    @classmethod
    def build(cls, n_polar: int, n_azimuth: int) -> "AngularQuadrature":
        mu, wmu = np.polynomial.legendre.leggauss(n_polar)
        phi = (np.arange(n_azimuth) + 0.5) * 2.0 * np.pi / n_azimuth
        sin_t = np.sqrt(1.0 - mu ** 2)
        nodes = np.stack([
            np.outer(sin_t, np.cos(phi)).ravel(),
            np.outer(sin_t, np.sin(phi)).ravel(),
            np.repeat(mu, n_azimuth),
        ], axis=1)
        nodes /= np.linalg.norm(nodes, axis=1, keepdims=True)
        weights = np.repeat(wmu, n_azimuth) * (2.0 * np.pi / n_azimuth)
        return cls(nodes=nodes, weights=weights, n_polar=n_polar, n_azimuth=n_azimuth,
                   antipode=_antipodal_map(nodes))

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def antipodal(self) -> bool:
        return self.antipode is not None


def _antipodal_map(nodes: np.ndarray) -> Optional[np.ndarray]:
    gap = np.linalg.norm(nodes[:, None, :] + nodes[None, :, :], axis=-1)
    partner = np.argmin(gap, axis=1)
    if np.max(gap[np.arange(len(nodes)), partner]) < 1e-12:
        return partner
    return None


@dataclass(frozen=True)
class EnergyGrid:
    """[E0, Em] 上的 Gauss–Legendre 能量网格"""
    e0: float
    em: float
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, e0: float, em: float, n_energy: int) -> "EnergyGrid":
        if not (0.0 <= e0 < em):
            raise ValueError("能量区间要求 0 ≤ E0 < Em")
        x, w = np.polynomial.legendre.leggauss(n_energy)
        half = 0.5 * (em - e0)
        return cls(e0=float(e0), em=float(em), nodes=e0 + half * (x + 1.0), weights=half * w)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def width(self) -> float:
        return self.em - self.e0


class SpatialGrid:
    """包围盒上的笛卡尔格点（单元中心），截取到区域内部"""

    def __init__(self, domain: Domain, nx: int):
        self.domain = domain
        self.nx = nx
        lo, hi = domain.bounding_box()
        self.lo = lo
        self.h = (hi - lo) / nx
        axes = [lo[a] + (np.arange(nx) + 0.5) * self.h[a] for a in range(3)]
        I, J, K = np.meshgrid(np.arange(nx), np.arange(nx), np.arange(nx), indexing="ij")
        centers = np.stack([axes[0][I], axes[1][J], axes[2][K]], axis=-1)
        inside = domain.contains_points(centers)
        if not inside.any():
            raise EmptyGrid(f"nx={nx} 时没有格点落在区域内部")

        self.inside = inside
        self.ijk = np.argwhere(inside)
        self.nodes = centers[inside]
        self.node_of_cell = np.full((nx, nx, nx), -1, dtype=np.int64)
        self.node_of_cell[inside] = np.arange(len(self.nodes))
        # 最近内部节点（用于最近值延拓）
        _, nearest = ndimage.distance_transform_edt(~inside, sampling=self.h, return_indices=True)
        self.nearest_node = self.node_of_cell[nearest[0], nearest[1], nearest[2]]
        self.cell_volumes = self._clipped_volumes()

    def _clipped_volumes(self) -> np.ndarray:
        n = VOLUME_SUBSAMPLES
        offsets = (np.arange(n) + 0.5) / n - 0.5
        O = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = self.nodes[:, None, :] + O[None, :, :] * self.h
        fraction = self.domain.contains_points(pts).mean(axis=1)
        return fraction * float(np.prod(self.h))

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def spacing(self) -> float:
        return float(np.min(self.h))

    def cell_of(self, X: np.ndarray) -> np.ndarray:
        """点所在格子的扁平编号（包围盒外为 -1）"""
        X = np.asarray(X, dtype=float).reshape(-1, 3)
        c = np.floor((X - self.lo) / self.h).astype(np.int64)
        ok = np.all((c >= 0) & (c < self.nx), axis=1)
        c = np.clip(c, 0, self.nx - 1)
        flat = (c[:, 0] * self.nx + c[:, 1]) * self.nx + c[:, 2]
        return np.where(ok, flat, -1)

    def stencil(self, X: np.ndarray, extension: str = "zero") -> Tuple[np.ndarray, np.ndarray]:
        """三线性插值模板：返回 (节点编号, 权重)，形状 (P, 8)；编号 -1 表示零值"""
        X = np.asarray(X, dtype=float).reshape(-1, 3)
        u = (X - self.lo) / self.h - 0.5
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        idx = np.empty((len(X), 8), dtype=np.int64)
        w = np.empty((len(X), 8), dtype=float)
        corner = 0
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    ci = i0 + np.array([a, b, c])
                    weight = ((frac[:, 0] if a else 1 - frac[:, 0])
                              * (frac[:, 1] if b else 1 - frac[:, 1])
                              * (frac[:, 2] if c else 1 - frac[:, 2]))
                    if extension == "nearest":
                        cc = np.clip(ci, 0, self.nx - 1)
                        node = self.nearest_node[cc[:, 0], cc[:, 1], cc[:, 2]]
                    elif extension == "zero":
                        ok = np.all((ci >= 0) & (ci < self.nx), axis=1)
                        cc = np.clip(ci, 0, self.nx - 1)
                        node = np.where(ok, self.node_of_cell[cc[:, 0], cc[:, 1], cc[:, 2]], -1)
                    else:
                        raise ValueError(f"未知的延拓方式: {extension}")
                    idx[:, corner] = node
                    w[:, corner] = weight
                    corner += 1
        return idx, w

    def interpolation_matrix(self, X: np.ndarray, extension: str = "zero") -> sp.csr_matrix:
        """插值矩阵 (P, N)"""
        idx, w = self.stencil(X, extension)
        rows = np.repeat(np.arange(len(idx)), 8)
        cols = idx.ravel()
        vals = w.ravel()
        keep = (cols >= 0) & (vals != 0.0)
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(len(idx), self.size))


class BoundaryQuadrature:
    """边界面元求积：球用经纬面元，长方体每个面 nx×nx 单元"""

    def __init__(self, domain: Domain, nx: int, angular: AngularQuadrature):
        self.domain = domain
        if isinstance(domain, Ball):
            self._build_ball(domain, nx)
        elif isinstance(domain, Box):
            self._build_box(domain, nx)
        else:
            raise TypeError(f"不支持的区域类型: {type(domain).__name__}")
        self.mu = self.normals @ angular.nodes.T
        self.inflow = self.mu < -TANGENT_TOL
        self.outflow = self.mu > TANGENT_TOL

    def _build_ball(self, ball: Ball, nx: int):
        self.kind = "ball"
        self.n_theta = max(nx, 2)
        self.n_phi = 2 * self.n_theta
        z, wz = np.polynomial.legendre.leggauss(self.n_theta)
        self.z_edges = np.concatenate([[-1.0], -1.0 + np.cumsum(wz)])
        self.z_edges[-1] = 1.0
        dphi = 2.0 * np.pi / self.n_phi
        phi = (np.arange(self.n_phi) + 0.5) * dphi
        Z = np.repeat(z, self.n_phi)
        PHI = np.tile(phi, self.n_theta)
        s = np.sqrt(1.0 - Z ** 2)
        self.normals = np.stack([s * np.cos(PHI), s * np.sin(PHI), Z], axis=1)
        self.points = ball.c + ball.radius * self.normals
        self.areas = ball.radius ** 2 * np.repeat(wz, self.n_phi) * dphi
        self.z_bounds = np.stack([self.z_edges[:-1], self.z_edges[1:]], axis=1).repeat(self.n_phi, axis=0)
        self.phi_bounds = np.stack([PHI - 0.5 * dphi, PHI + 0.5 * dphi], axis=1)

    def _build_box(self, box: Box, nx: int):
        self.kind = "box"
        self.n_face = nx
        lo, hi = box.lo_arr, box.hi_arr
        h = (hi - lo) / nx
        points, normals, areas, lows, highs = [], [], [], [], []
        centers = (np.arange(nx) + 0.5)
        for axis in range(3):
            b, c = [a for a in range(3) if a != axis]
            for side, value, sign in ((0, lo[axis], -1.0), (1, hi[axis], 1.0)):
                I, K = np.meshgrid(np.arange(nx), np.arange(nx), indexing="ij")
                P = np.empty((nx * nx, 3))
                P[:, axis] = value
                P[:, b] = lo[b] + centers[I.ravel()] * h[b]
                P[:, c] = lo[c] + centers[K.ravel()] * h[c]
                Nrm = np.zeros((nx * nx, 3))
                Nrm[:, axis] = sign
                points.append(P)
                normals.append(Nrm)
                areas.append(np.full(nx * nx, h[b] * h[c]))
                cell_lo = P.copy()
                cell_lo[:, b] -= 0.5 * h[b]
                cell_lo[:, c] -= 0.5 * h[c]
                cell_hi = P.copy()
                cell_hi[:, b] += 0.5 * h[b]
                cell_hi[:, c] += 0.5 * h[c]
                lows.append(cell_lo)
                highs.append(cell_hi)
        self.points = np.concatenate(points)
        self.normals = np.concatenate(normals)
        self.areas = np.concatenate(areas)
        self.cell_lo = np.concatenate(lows)
        self.cell_hi = np.concatenate(highs)
        self.h = h

    @property
    def size(self) -> int:
        return len(self.areas)

    def locate(self, Y: np.ndarray, normals: Optional[np.ndarray] = None) -> np.ndarray:
        """边界点所在面元编号"""
        Y = np.asarray(Y, dtype=float).reshape(-1, 3)
        if self.kind == "ball":
            ball: Ball = self.domain
            P = (Y - ball.c) / ball.radius
            z = np.clip(P[:, 2], -1.0, 1.0)
            i = np.clip(np.searchsorted(self.z_edges, z, side="right") - 1, 0, self.n_theta - 1)
            phi = np.mod(np.arctan2(P[:, 1], P[:, 0]), 2.0 * np.pi)
            k = np.clip(np.floor(phi / (2.0 * np.pi / self.n_phi)).astype(np.int64), 0, self.n_phi - 1)
            return i * self.n_phi + k
        box: Box = self.domain
        if normals is None:
            normals = box.normals_at(Y)
        normals = np.asarray(normals).reshape(-1, 3)
        axis = np.argmax(np.abs(normals), axis=1)
        side = (np.take_along_axis(normals, axis[:, None], axis=1)[:, 0] > 0).astype(np.int64)
        face = 2 * axis + side
        others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        nx = self.n_face
        coords = []
        for col in (0, 1):
            a = others[:, col]
            v = (Y[np.arange(len(Y)), a] - box.lo_arr[a]) / self.h[a]
            coords.append(np.clip(np.floor(v).astype(np.int64), 0, nx - 1))
        return face * nx * nx + coords[0] * nx + coords[1]

    def mask(self, side: str) -> np.ndarray:
        if side == "inflow":
            return self.inflow
        if side == "outflow":
            return self.outflow
        raise ValueError(f"未知的边界侧: {side}")


class PhaseGrid:
    """相空间网格 G×S×I 及其边界求积"""

    def __init__(self, domain: Domain, spatial: SpatialGrid, angular: AngularQuadrature,
                 energy: EnergyGrid, boundary: BoundaryQuadrature):
        self.domain = domain
        self.spatial = spatial
        self.angular = angular
        self.energy = energy
        self.boundary = boundary
        self.volume_weights = (spatial.cell_volumes[:, None, None]
                               * angular.weights[None, :, None]
                               * energy.weights[None, None, :])

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return (N_SPECIES, self.spatial.size, self.angular.size, self.energy.size)

    @property
    def boundary_shape(self) -> Tuple[int, int, int, int]:
        return (N_SPECIES, self.boundary.size, self.angular.size, self.energy.size)

    def boundary_weights(self, side: str = "inflow") -> np.ndarray:
        """面积·w_ω·w_E·|ω·ν|，另一侧为零"""
        b = self.boundary
        mask = b.mask(side)
        w = (b.areas[:, None] * np.abs(b.mu) * self.angular.weights[None, :]) * mask
        return w[:, :, None] * self.energy.weights[None, None, :]

    def boundary_samples(self, side: str = "inflow"):
        """展开的边界样本 (y, ν, ω, E, 权重)"""
        weights = self.boundary_weights(side)
        s, q, m = np.nonzero(weights)
        b = self.boundary
        return (b.points[s], b.normals[s], self.angular.nodes[q], self.energy.nodes[m], weights[s, q, m])


def build_phase_grid(dom: Domain, nx: int, n_polar: int, n_azimuth: int, n_energy: int,
                     e0: float = 0.0, em: float = 1.0) -> PhaseGrid:
    """构建张量积相空间网格"""
    for name, value in (("nx", nx), ("n_polar", n_polar), ("n_azimuth", n_azimuth), ("n_energy", n_energy)):
        if value < 2:
            raise ValueError(f"{name} 必须 ≥ 2，当前为 {value}")
    spatial = SpatialGrid(dom, nx)
    angular = AngularQuadrature.build(n_polar, n_azimuth)
    energy = EnergyGrid.build(e0, em, n_energy)
    boundary = BoundaryQuadrature(dom, nx, angular)
    grid = PhaseGrid(dom, spatial, angular, energy, boundary)
    logger.debug(f"相空间网格: 空间节点 {spatial.size}, 方向 {angular.size}, 能量 {energy.size}, "
                 f"边界面元 {boundary.size}")
    return grid


# === 相空间场 ===

def zeros(grid: PhaseGrid) -> np.ndarray:
    return np.zeros(grid.shape)


def full(grid: PhaseGrid, value: float) -> np.ndarray:
    return np.full(grid.shape, float(value))


def boundary_zeros(grid: PhaseGrid) -> np.ndarray:
    return np.zeros(grid.boundary_shape)


def check_field(field: np.ndarray, grid: PhaseGrid, boundary: bool = False) -> np.ndarray:
    """检查形状与有限性"""
    field = np.asarray(field, dtype=float)
    expected = grid.boundary_shape if boundary else grid.shape
    if field.shape != expected:
        raise ShapeMismatch(f"场形状 {field.shape} 与网格 {expected} 不匹配",
                            details={'shape': list(field.shape), 'expected': list(expected)})
    if not np.all(np.isfinite(field)):
        raise ShapeMismatch("场包含 NaN 或 Inf")
    return field


def integrate_phase(field: np.ndarray, grid: PhaseGrid, p: int = 1) -> float:
    """乘积范数：p=1 为 Σⱼ‖ψⱼ‖₁，p≥2 为 (Σⱼ‖ψⱼ‖ₚᵖ)^{1/p}"""
    if p not in (1, 2, 3):
        raise BadExponent(f"不支持的指数 p={p}")
    field = check_field(field, grid)
    per_species = np.array([
        np.sum(np.abs(field[j]) ** p * grid.volume_weights) ** (1.0 / p) for j in range(N_SPECIES)
    ])
    return float(np.sum(per_species ** p) ** (1.0 / p))


def inner_product(a: np.ndarray, b: np.ndarray, grid: PhaseGrid) -> float:
    """相空间内积 Σ a·b·w_x·w_ω·w_E"""
    return float(np.sum(a * b * grid.volume_weights[None]))


def boundary_inner(a: np.ndarray, b: np.ndarray, grid: PhaseGrid, side: str = "inflow") -> float:
    """边界内积（|ω·ν| 测度）"""
    return float(np.sum(a * b * grid.boundary_weights(side)[None]))


def trace_norm(values: np.ndarray, grid: PhaseGrid, side: str = "inflow", p: int = 1) -> float:
    """Tᵖ(Γ±) 范数"""
    w = grid.boundary_weights(side)[None]
    per_species = np.sum(np.abs(values) ** p * w, axis=(1, 2, 3)) ** (1.0 / p)
    return float(np.sum(per_species ** p) ** (1.0 / p))


def interpolate_spatial(field: np.ndarray, grid: PhaseGrid, x, j: int, q: int, m: int,
                        extension: str = "zero") -> float:
    """(j, ω_q, E_m) 分量在点 x 的三线性插值；格外单元零延拓"""
    field = check_field(field, grid)
    if not (0 <= j < field.shape[0] and 0 <= q < field.shape[2] and 0 <= m < field.shape[3]):
        raise ShapeMismatch(f"索引 (j={j}, q={q}, m={m}) 超出场范围")
    idx, w = grid.spatial.stencil(np.asarray(x, dtype=float)[None, :], extension)
    values = field[j, :, q, m]
    v = np.where(idx >= 0, values[np.maximum(idx, 0)], 0.0)
    return float(np.sum(v * w))


@dataclass
class AnalyticField:
    """解析测试函数 v(x,ω,E) 及其方向导数 ω·∇ₓv，批量求值返回 (P, Q, M)"""
    value: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    directional: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

    def evaluate(self, X: np.ndarray, W: np.ndarray, E: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        shape = (len(X), len(W), len(E))
        return (np.broadcast_to(self.value(X, W, E), shape),
                np.broadcast_to(self.directional(X, W, E), shape))

    @classmethod
    def linear(cls, a, c: float = 0.0) -> "AnalyticField":
        """v = a·x + c"""
        a = np.asarray(a, dtype=float)
        return cls(
            value=lambda X, W, E: (X @ a + c)[:, None, None],
            directional=lambda X, W, E: (W @ a)[None, :, None],
        )

    @classmethod
    def quadratic(cls, center=(0.0, 0.0, 0.0)) -> "AnalyticField":
        """v = |x − c|²"""
        c0 = np.asarray(center, dtype=float)
        return cls(
            value=lambda X, W, E: np.sum((X - c0) ** 2, axis=1)[:, None, None],
            directional=lambda X, W, E: (2.0 * (X - c0) @ W.T)[:, :, None],
        )


def from_function(grid: PhaseGrid, fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """按 fn(X, W, E) 填充相空间场；返回值可广播到 (3, N, Q, M)"""
    values = fn(grid.spatial.nodes, grid.angular.nodes, grid.energy.nodes)
    return np.broadcast_to(np.asarray(values, dtype=float), grid.shape).copy()


def boundary_patch(grid: PhaseGrid, center=None, radius: Optional[float] = None, axis=None,
                   half_angle: Optional[float] = None, energy_window: Optional[Tuple[float, float]] = None
                   ) -> np.ndarray:
    """入流边界上的子集 (S, Q, M)：面元中心距 center ≤ radius，方向在以 axis 为轴、半角 half_angle（度）的锥内，
    能量在 energy_window 内"""
    b = grid.boundary
    mask = np.broadcast_to(b.inflow[:, :, None], grid.boundary_shape[1:]).copy()
    if center is not None and radius is not None:
        near = np.linalg.norm(b.points - np.asarray(center, dtype=float), axis=1) <= radius
        mask &= near[:, None, None]
    if axis is not None and half_angle is not None:
        a = np.asarray(axis, dtype=float)
        a = a / np.linalg.norm(a)
        inside = grid.angular.nodes @ a >= np.cos(np.deg2rad(half_angle))
        mask &= inside[None, :, None]
    if energy_window is not None:
        lo, hi = energy_window
        E = grid.energy.nodes
        mask &= ((E >= lo) & (E <= hi))[None, None, :]
    return mask
