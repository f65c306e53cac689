#!/usr/bin/env python3
"""
剂量计算
D(x) = Σⱼ∫κⱼψⱼ dω dE、伴随 D*d = κd、时间累积剂量与剂量体积直方图
"""

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger

from cross_sections import CrossSections
from discretization import PhaseGrid, check_field
from errors import LengthMismatch, ShapeMismatch


def compute_dose(psi: np.ndarray, xs: CrossSections, grid: PhaseGrid) -> np.ndarray:
    """每个空间节点上的沉积剂量"""
    psi = check_field(psi, grid)
    kappa = xs.kappa_nodes(grid)
    w = grid.angular.weights[:, None] * grid.energy.weights[None, :]
    return np.einsum("jn,jnqm,qm->n", kappa, psi, w)


def dose_adjoint(d: np.ndarray, xs: CrossSections, grid: PhaseGrid) -> np.ndarray:
    """(D*d)ⱼ(x,ω,E) = κⱼ(x)·d(x)"""
    d = np.asarray(d, dtype=float)
    if d.shape != (grid.spatial.size,):
        raise ShapeMismatch(f"剂量形状 {d.shape} 与空间节点数 {grid.spatial.size} 不匹配")
    field = xs.kappa_nodes(grid) * d[None, :]
    return np.broadcast_to(field[:, :, None, None], grid.shape).copy()


def accumulate_dose(traj: Sequence[np.ndarray], tg, xs: CrossSections, grid: PhaseGrid) -> np.ndarray:
    """梯形法则累积 ∫₀ᵀ D(x,t) dt"""
    states = getattr(traj, "states", traj)
    if len(states) != tg.n_steps + 1:
        raise LengthMismatch(f"轨迹长度 {len(states)} 与时间步数 {tg.n_steps} + 1 不一致")
    doses = np.stack([compute_dose(psi, xs, grid) for psi in states])
    weights = np.full(len(states), tg.dt)
    weights[[0, -1]] *= 0.5
    return weights @ doses


def dose_volume_histogram(dose: np.ndarray, mask: np.ndarray, volumes: np.ndarray,
                          bins: Union[int, Sequence[float]] = 50):
    """累积 DVH：返回 (剂量阈值, 超过该阈值的体积分数)"""
    dose = np.asarray(dose, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    vol = np.asarray(volumes, dtype=float)[mask]
    if vol.sum() <= 0:
        return np.zeros(0), np.zeros(0)
    values = dose[mask]
    if np.isscalar(bins):
        thresholds = np.linspace(0.0, max(float(values.max()), 1e-300), int(bins) + 1)
    else:
        thresholds = np.asarray(bins, dtype=float)
    fractions = np.array([vol[values > t].sum() for t in thresholds]) / vol.sum()
    return thresholds, fractions


def dose_frame(dose: np.ndarray, grid: PhaseGrid, normalized: bool = False,
               stderr: Optional[np.ndarray] = None) -> pd.DataFrame:
    """剂量表：ix,iy,iz,x,y,z,dose[,dose_normalized][,stderr]"""
    ijk = grid.spatial.ijk
    X = grid.spatial.nodes
    df = pd.DataFrame({
        'ix': ijk[:, 0], 'iy': ijk[:, 1], 'iz': ijk[:, 2],
        'x': X[:, 0], 'y': X[:, 1], 'z': X[:, 2],
        'dose': np.asarray(dose, dtype=float),
    })
    if normalized:
        peak = float(np.max(np.abs(dose))) if len(dose) else 0.0
        df['dose_normalized'] = df['dose'] / peak if peak > 0 else 0.0
    if stderr is not None:
        df['stderr'] = np.asarray(stderr, dtype=float)
    return df


def write_dose_csv(path: Union[str, Path], dose: np.ndarray, grid: PhaseGrid, normalized: bool = False,
                   stderr: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    dose_frame(dose, grid, normalized, stderr).to_csv(path, index=False, float_format="%.12e")
    logger.info(f"剂量已写出: {path}")
    return path
