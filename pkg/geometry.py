#!/usr/bin/env python3
"""
凸区域几何
成员判断、逃逸时间 t(x,ω)、边界击中点与外法向、入流/出流分类、直径
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import BadDirection, NotInterior, NotOnBoundary, TangentFace

DIRECTION_TOL = 1e-12
TANGENT_TOL = 1e-12
ABS_FLOOR = 1e-14


class BoundaryClass(str, Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    TANGENT = "tangent"


@dataclass(frozen=True)
class BoundaryHit:
    """反向追踪的边界击中点"""
    point: np.ndarray
    normal: np.ndarray
    time: float


class Domain(ABC):
    """开的、有界的凸区域"""

    @property
    @abstractmethod
    def diameter(self) -> float:
        ...

    @property
    @abstractmethod
    def volume(self) -> float:
        ...

    @property
    @abstractmethod
    def surface_area(self) -> float:
        ...

    @abstractmethod
    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        ...

    @abstractmethod
    def contains_points(self, X: np.ndarray) -> np.ndarray:
        """严格内部成员判断（批量）"""

    @abstractmethod
    def escape_times(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """沿 -ω 的逃逸时间（批量，不做前提检查）"""

    @abstractmethod
    def exit_normals(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """沿 -ω 逃逸时击中点的外法向（批量）"""

    @abstractmethod
    def boundary_distance(self, Y: np.ndarray) -> np.ndarray:
        """到边界的距离（批量）"""

    @abstractmethod
    def normals_at(self, Y: np.ndarray) -> np.ndarray:
        """边界点的外法向（批量）"""

    def contains(self, x) -> bool:
        return bool(self.contains_points(np.asarray(x, dtype=float)[None, :])[0])

    def escape_times_forward(self, X: np.ndarray, W: np.ndarray) -> np.ndarray:
        """沿 +ω 的首次离开时间 t₊(y,ω) = t(y,-ω)"""
        return self.escape_times(X, -np.asarray(W, dtype=float))

    @property
    def tolerance(self) -> float:
        return max(1e-12 * self.diameter, ABS_FLOOR)


@dataclass(frozen=True)
class Ball(Domain):
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("球半径必须为正")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * self.radius ** 3

    @property
    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def bounding_box(self):
        return self.c - self.radius, self.c + self.radius

    def contains_points(self, X):
        P = np.asarray(X, dtype=float) - self.c
        return np.einsum("...i,...i->...", P, P) < self.radius ** 2

    def _chord(self, X, W):
        P = np.asarray(X, dtype=float) - self.c
        W = np.asarray(W, dtype=float)
        pw = np.einsum("...i,...i->...", P, W)
        disc = pw ** 2 + self.radius ** 2 - np.einsum("...i,...i->...", P, P)
        return P, pw, np.sqrt(np.maximum(disc, 0.0))

    def escape_times(self, X, W):
        _, pw, root = self._chord(X, W)
        return np.maximum(pw + root, 0.0)

    def exit_normals(self, X, W):
        W = np.asarray(W, dtype=float)
        t = self.escape_times(X, W)
        Y = np.asarray(X, dtype=float) - t[..., None] * W
        return self.normals_at(Y)

    def boundary_distance(self, Y):
        P = np.asarray(Y, dtype=float) - self.c
        return np.abs(np.linalg.norm(P, axis=-1) - self.radius)

    def normals_at(self, Y):
        P = np.asarray(Y, dtype=float) - self.c
        return P / np.linalg.norm(P, axis=-1, keepdims=True)

    def escape_time_gradient(self, X, W) -> np.ndarray:
        """∇ₓt = ω + (⟨x,ω⟩ω − x)/√(⟨x,ω⟩² + r² − |x|²)"""
        P, pw, root = self._chord(X, W)
        W = np.asarray(W, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return W + (pw[..., None] * W - P) / root[..., None]


@dataclass(frozen=True)
class Box(Domain):
    lo: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("长方体要求 lo < hi（逐分量）")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=float)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi_arr - self.lo_arr))

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi_arr - self.lo_arr))

    @property
    def surface_area(self) -> float:
        a, b, c = self.hi_arr - self.lo_arr
        return float(2 * (a * b + b * c + a * c))

    def bounding_box(self):
        return self.lo_arr.copy(), self.hi_arr.copy()

    def contains_points(self, X):
        X = np.asarray(X, dtype=float)
        return np.all((X > self.lo_arr) & (X < self.hi_arr), axis=-1)

    def _face_times(self, X, W):
        X = np.asarray(X, dtype=float)
        W = np.asarray(W, dtype=float)
        W, X = np.broadcast_arrays(W, X)
        # 沿 -ω 运动：ω_i > 0 击中 lo_i 面，ω_i < 0 击中 hi_i 面
        target = np.where(W > 0, self.lo_arr, self.hi_arr)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (X - target) / W
        s = np.where(W == 0, np.inf, s)
        return np.where(s < 0, 0.0, s)

    def escape_times(self, X, W):
        return np.min(self._face_times(X, W), axis=-1)

    def exit_normals(self, X, W):
        W = np.asarray(W, dtype=float)
        s = self._face_times(X, W)
        axis = np.argmin(s, axis=-1)
        Wb = np.broadcast_to(W, s.shape)
        sign = -np.sign(np.take_along_axis(Wb, axis[..., None], axis=-1))[..., 0]
        sign = np.where(sign == 0, 1.0, sign)
        normals = np.zeros(s.shape, dtype=float)
        np.put_along_axis(normals, axis[..., None], sign[..., None], axis=-1)
        return normals

    def boundary_distance(self, Y):
        Y = np.asarray(Y, dtype=float)
        outside = np.maximum(np.maximum(self.lo_arr - Y, Y - self.hi_arr), 0.0)
        out = np.linalg.norm(outside, axis=-1)
        inside = np.min(np.minimum(Y - self.lo_arr, self.hi_arr - Y), axis=-1)
        return np.where(out > 0, out, np.abs(inside))

    def normals_at(self, Y):
        Y = np.asarray(Y, dtype=float)
        gaps = np.concatenate([np.abs(Y - self.lo_arr), np.abs(self.hi_arr - Y)], axis=-1)
        k = np.argmin(gaps, axis=-1)
        axis = k % 3
        sign = np.where(k < 3, -1.0, 1.0)
        normals = np.zeros(Y.shape, dtype=float)
        np.put_along_axis(normals, axis[..., None], sign[..., None], axis=-1)
        return normals


@dataclass(frozen=True)
class Region:
    """区域内的命名子区域（截面分区与规划标签）"""
    name: str
    shape: Domain
    label: Optional[str] = None


def region_index(regions: Sequence[Region], X: np.ndarray) -> np.ndarray:
    """每个点所属子区域的编号：0 为背景，k 为第 k 个子区域（后者覆盖前者）"""
    X = np.asarray(X, dtype=float)
    idx = np.zeros(X.shape[:-1], dtype=np.int64)
    for k, region in enumerate(regions, start=1):
        idx[region.shape.contains_points(X)] = k
    return idx


def _check_direction(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (3,) or abs(np.linalg.norm(omega) - 1.0) > DIRECTION_TOL:
        raise BadDirection(f"方向必须是单位向量: {omega}", details={'omega': omega.tolist()})
    return omega


def escape_time(dom: Domain, x, omega) -> float:
    """t(x,ω) = inf{s>0 | x − sω ∉ G}"""
    omega = _check_direction(omega)
    x = np.asarray(x, dtype=float)
    if not dom.contains(x):
        raise NotInterior(f"点 {x.tolist()} 不在区域内部")
    return float(dom.escape_times(x[None, :], omega[None, :])[0])


def escape_time_forward(dom: Domain, y, omega) -> float:
    """t₊(y,ω) = inf{s>0 | y + sω ∉ G}，y 可在闭包上"""
    omega = _check_direction(omega)
    y = np.asarray(y, dtype=float)
    return float(dom.escape_times_forward(y[None, :], omega[None, :])[0])


def boundary_hit(dom: Domain, x, omega) -> BoundaryHit:
    """反向击中点 y = x − t(x,ω)ω 及其外法向"""
    t = escape_time(dom, x, omega)
    omega = np.asarray(omega, dtype=float)
    y = np.asarray(x, dtype=float) - t * omega
    normal = dom.exit_normals(np.asarray(x, dtype=float)[None, :], omega[None, :])[0]
    if abs(float(omega @ normal)) < TANGENT_TOL:
        raise TangentFace(
            f"射线在 {y.tolist()} 处掠过边界",
            details={'point': y.tolist(), 'omega': omega.tolist()}
        )
    return BoundaryHit(point=y, normal=normal, time=t)


def classify_boundary(dom: Domain, y, omega) -> BoundaryClass:
    """Γ₋: ω·ν < −τ；Γ₊: ω·ν > τ；其余为切向"""
    omega = _check_direction(omega)
    y = np.asarray(y, dtype=float)
    if dom.boundary_distance(y[None, :])[0] > dom.tolerance:
        raise NotOnBoundary(f"点 {y.tolist()} 不在边界上")
    mu = float(omega @ dom.normals_at(y[None, :])[0])
    if mu < -TANGENT_TOL:
        return BoundaryClass.INFLOW
    if mu > TANGENT_TOL:
        return BoundaryClass.OUTFLOW
    return BoundaryClass.TANGENT


def random_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    """球面上均匀分布的单位向量"""
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_interior_points(dom: Domain, rng: np.random.Generator, n: int) -> np.ndarray:
    """区域内部的均匀随机点（拒绝抽样）"""
    lo, hi = dom.bounding_box()
    out: List[np.ndarray] = []
    count = 0
    while count < n:
        X = rng.uniform(lo, hi, size=(2 * n, 3))
        X = X[dom.contains_points(X)]
        out.append(X)
        count += len(X)
    return np.concatenate(out)[:n]
