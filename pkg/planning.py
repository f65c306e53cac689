#!/usr/bin/env python3
"""
逆向治疗计划
目标函数（物理准则 + 剂量体积约束）、伴随梯度、最优性系统的阻尼不动点初始解、
投影梯度细化（外照射 / 内照射两种控制）
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from cross_sections import CrossSections
from discretization import N_SPECIES, PhaseGrid, boundary_patch, integrate_phase
from dose import compute_dose, dose_adjoint
from errors import BadExponent, LineSearchStall, NoConvergence, ShapeMismatch
from geometry import Region, region_index
from transport import SolveOptions, adjoint_inflow_trace, solve_adjoint, solve_coupled

TARGET, CRITICAL, NORMAL = 0, 1, 2
LABELS = {'target': TARGET, 'critical': CRITICAL, 'normal': NORMAL}


# === 区域与处方 ===

@dataclass
class RegionMap:
    """每个空间节点的标签：0 靶区 T，1 危及器官 C，2 正常组织 N"""
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not np.all(np.isin(self.labels, (TARGET, CRITICAL, NORMAL))):
            raise ShapeMismatch("区域标签必须属于 {T, C, N}")

    @property
    def target(self) -> np.ndarray:
        return self.labels == TARGET

    @property
    def critical(self) -> np.ndarray:
        return self.labels == CRITICAL

    @property
    def normal(self) -> np.ndarray:
        return self.labels == NORMAL

    @classmethod
    def from_regions(cls, regions: Sequence[Region], grid: PhaseGrid) -> "RegionMap":
        """按子区域的 label（target / critical / normal）标注，未覆盖处为正常组织"""
        codes = np.array([NORMAL] + [LABELS.get((r.label or "normal").lower(), NORMAL) for r in regions])
        return cls(codes[region_index(regions, grid.spatial.nodes)])

    @classmethod
    def from_csv(cls, path, grid: PhaseGrid) -> "RegionMap":
        """读取 ix,iy,iz,label 表；缺失节点为正常组织"""
        df = pd.read_csv(path)
        labels = np.full(grid.spatial.size, NORMAL, dtype=np.int64)
        node = grid.spatial.node_of_cell[df['ix'].to_numpy(), df['iy'].to_numpy(), df['iz'].to_numpy()]
        codes = df['label'].map(lambda v: LABELS[str(v).lower()] if str(v).lower() in LABELS else int(v))
        ok = node >= 0
        labels[node[ok]] = codes.to_numpy()[ok]
        return cls(labels)


class DoseVolume(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_c: float = Field(default=1.0, ge=0)
    v_c: float = Field(default=1.0, ge=0, le=1)


class PlanWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    c_t: float = Field(default=1.0, ge=0)
    c_c: float = Field(default=1.0, ge=0)
    c_n: float = Field(default=0.1, ge=0)
    c_dv: float = Field(default=0.0, ge=0)
    c_ad: float = Field(default=0.0, ge=0)
    c_sc: float = Field(default=0.0, ge=0)


class ControlSupport(BaseModel):
    """控制的支撑集：粒子种类、边界面片/方向锥/能量窗（外照射）或子区域（内照射）"""
    model_config = ConfigDict(extra="forbid")

    species: List[int] = Field(default_factory=lambda: [0, 1, 2])
    patch_center: Optional[Tuple[float, float, float]] = None
    patch_radius: Optional[float] = Field(default=None, gt=0)
    cone_axis: Optional[Tuple[float, float, float]] = None
    cone_half_angle: Optional[float] = Field(default=None, gt=0, le=180)
    energy_window: Optional[Tuple[float, float]] = None
    region: Optional[str] = None

    @field_validator("species")
    @classmethod
    def _check_species(cls, v):
        if not v or any(j not in range(N_SPECIES) for j in v):
            raise ValueError("species 必须是 {0,1,2} 的非空子集")
        return v


class Prescription(BaseModel):
    """剂量处方"""
    model_config = ConfigDict(extra="forbid")

    d0: float = Field(gt=0)
    dcap_c: float = Field(default=0.0, ge=0)
    dcap_n: float = Field(default=0.0, ge=0)
    dv: DoseVolume = Field(default_factory=DoseVolume)
    weights: PlanWeights = Field(default_factory=PlanWeights)
    c: float = Field(default=0.5, gt=0)
    eps: Optional[float] = Field(default=None, gt=0)
    mode: Literal["external", "internal"] = "external"
    reduction: Literal["full", "energy_independent", "energy_angle_independent"] = "full"
    targets: Optional[Tuple[float, float, float]] = None
    control_support: ControlSupport = Field(default_factory=ControlSupport)

    @model_validator(mode="after")
    def _check_targets(self):
        if self.targets is not None and min(self.targets) < 0:
            raise ValueError("跟踪目标剂量必须非负")
        return self

    @property
    def epsilon(self) -> float:
        """Hε 宽度，默认 0.05·d_C"""
        if self.eps is not None:
            return self.eps
        return 0.05 * self.dv.d_c if self.dv.d_c > 0 else 1e-3

    @property
    def tracking_targets(self) -> Tuple[float, float, float]:
        return self.targets if self.targets is not None else (self.d0, 0.0, 0.0)

    def with_weights(self, **kwargs) -> "Prescription":
        return self.model_copy(update={'weights': self.weights.model_copy(update=kwargs)})


class PlanningOptions(BaseModel):
    """不动点与投影梯度参数"""
    model_config = ConfigDict(extra="forbid")

    theta: Union[float, Literal["auto"]] = 0.5
    fixed_point_tol: float = Field(default=1e-6, gt=0)
    max_fixed_point: int = Field(default=500, ge=1)
    power_iterations: int = Field(default=30, ge=1)
    pg_max_iter: int = Field(default=200, ge=1)
    pg_tol: float = Field(default=1e-5, gt=0)
    armijo_step: float = Field(default=1.0, gt=0)
    armijo_factor: float = Field(default=0.5, gt=0, lt=1)
    armijo_slope: float = Field(default=1e-4, gt=0, lt=1)
    min_step: float = Field(default=1e-12, gt=0)
    n_starts: int = Field(default=5, ge=1)
    perturbation: float = Field(default=0.1, ge=0)
    seed: int = 0
    solve: SolveOptions = Field(default_factory=SolveOptions)

    @field_validator("theta")
    @classmethod
    def _check_theta(cls, v):
        if v != "auto" and not (0 < float(v) <= 1):
            raise ValueError("θ 必须在 (0, 1] 内或为 'auto'")
        return v


# === 控制空间 ===

class ControlSpace(ABC):
    """控制变量所在的空间：形状、内积权重、支撑掩码与到源项的映射"""

    shape: Tuple[int, ...]
    weights: np.ndarray
    mask: np.ndarray

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def project(self, values: np.ndarray) -> np.ndarray:
        """投影到可行集 {u ≥ 0, 支撑外为 0}"""
        return np.where(self.mask, np.maximum(values, 0.0), 0.0)

    def restrict(self, values: np.ndarray) -> np.ndarray:
        return np.where(self.mask, values, 0.0)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(a * b * self.weights))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    @abstractmethod
    def sources(self, values: np.ndarray) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """控制 → (f, g)"""

    @abstractmethod
    def adjoint_representative(self, psi_star: np.ndarray, f_star: np.ndarray) -> np.ndarray:
        """⟨f*, ψ(u)⟩ 对 u 的 Riesz 表示（外照射 γ₋ψ*，内照射 ψ* 的约化平均）"""


class ExternalControl(ControlSpace):
    """入流边界控制 g (3, S, Q, M)"""

    def __init__(self, case: "PlanningCase", support: ControlSupport):
        grid = case.grid
        self.case = case
        self.shape = grid.boundary_shape
        self.weights = np.broadcast_to(grid.boundary_weights("inflow")[None], self.shape)
        patch = boundary_patch(grid, support.patch_center, support.patch_radius, support.cone_axis,
                               support.cone_half_angle, support.energy_window)
        species = np.isin(np.arange(N_SPECIES), support.species)
        self.mask = species[:, None, None, None] & patch[None]

    def sources(self, values):
        return None, values

    def adjoint_representative(self, psi_star, f_star):
        case = self.case
        return adjoint_inflow_trace(psi_star, f_star, case.xs, case.grid, case.opts.solve)


class InternalControl(ControlSpace):
    """体源控制 f；reduction 决定与能量 / 方向无关的约化形式"""

    def __init__(self, case: "PlanningCase", support: ControlSupport, reduction: str = "full"):
        grid = case.grid
        self.case = case
        self.reduction = reduction
        Q = 1 if reduction == "energy_angle_independent" else grid.angular.size
        M = 1 if reduction != "full" else grid.energy.size
        self.shape = (N_SPECIES, grid.spatial.size, Q, M)
        W = grid.volume_weights
        if M == 1:
            W = W.sum(axis=2, keepdims=True)
        if Q == 1:
            W = W.sum(axis=1, keepdims=True)
        self.weights = np.broadcast_to(W[None], self.shape)
        nodes = np.ones(grid.spatial.size, dtype=bool)
        if support.region is not None:
            names = [r.name for r in case.xs.regions]
            if support.region not in names:
                raise ShapeMismatch(f"控制支撑子区域 {support.region} 不存在")
            nodes = case.xs.region_of(grid.spatial.nodes) == names.index(support.region) + 1
        species = np.isin(np.arange(N_SPECIES), support.species)
        self.mask = np.broadcast_to(species[:, None, None, None] & nodes[None, :, None, None], self.shape)

    def broadcast(self, values: np.ndarray) -> np.ndarray:
        return np.broadcast_to(values, self.case.grid.shape).copy()

    def reduce(self, field: np.ndarray) -> np.ndarray:
        """加权平均到约化轴"""
        W = self.case.grid.volume_weights[None]
        num = field * W
        den = np.broadcast_to(W, field.shape)
        axes = tuple(a for a, n in ((2, self.shape[2]), (3, self.shape[3])) if n == 1)
        if not axes:
            return field
        return num.sum(axis=axes, keepdims=True) / np.maximum(den.sum(axis=axes, keepdims=True), 1e-300)

    def sources(self, values):
        return self.broadcast(values), None

    def adjoint_representative(self, psi_star, f_star):
        return self.reduce(psi_star)


@dataclass
class Control:
    values: np.ndarray
    space: ControlSpace


# === 目标函数 ===

@dataclass
class ObjectiveReport:
    J_T: float = 0.0
    J_C: float = 0.0
    J_N: float = 0.0
    J_DV: float = 0.0
    J_ad: float = 0.0
    J_sc: float = 0.0
    J_reg: float = 0.0
    total: float = 0.0

    def as_dict(self) -> Dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("J_T", "J_C", "J_N", "J_DV", "J_ad", "J_sc", "J_reg", "total")}


def ramp(x: np.ndarray, eps: float) -> np.ndarray:
    """分段线性 Hε：x ≤ 0 为 0，0<x<ε 为 x/ε，x ≥ ε 为 1"""
    return np.clip(np.asarray(x, dtype=float) / eps, 0.0, 1.0)


def ramp_derivative(x: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where((x > 0) & (x < eps), 1.0 / eps, 0.0)


def dv_fraction(dose: np.ndarray, rx: Prescription, regions: RegionMap, grid: PhaseGrid) -> float:
    """(1/|C|)∫_C Hε(D − d_C)"""
    vol = grid.spatial.cell_volumes
    C = regions.critical
    size = float(vol[C].sum())
    if size <= 0:
        return 0.0
    return float(np.sum(ramp(dose[C] - rx.dv.d_c, rx.epsilon) * vol[C]) / size)


def evaluate_objective(dose: np.ndarray, rx: Prescription, regions: RegionMap, p: int, grid: PhaseGrid,
                       control: Optional[Control] = None, psi: Optional[np.ndarray] = None) -> ObjectiveReport:
    """物理准则各项与加权总和"""
    if p not in (1, 2):
        raise BadExponent(f"目标函数只支持 p ∈ {{1, 2}}，当前 p={p}")
    dose = np.asarray(dose, dtype=float)
    if dose.shape != (grid.spatial.size,):
        raise ShapeMismatch(f"剂量形状 {dose.shape} 与空间节点数不匹配")
    vol = grid.spatial.cell_volumes
    T, C, N = regions.target, regions.critical, regions.normal
    rep = ObjectiveReport()
    rep.J_T = float(np.sum(np.abs(rx.d0 - dose[T]) ** p * vol[T]))
    rep.J_C = float(np.sum(np.maximum(dose[C] - rx.dcap_c, 0.0) ** p * vol[C]))
    rep.J_N = float(np.sum(np.maximum(dose[N] - rx.dcap_n, 0.0) ** p * vol[N]))
    excess = dv_fraction(dose, rx, regions, grid) - rx.dv.v_c
    rep.J_DV = float(max(excess, 0.0) ** p)
    if control is not None:
        u = control.values
        rep.J_ad = float(np.sum(np.abs(np.minimum(u, 0.0)) ** p * control.space.weights))
        rep.J_reg = control.space.inner(u, u)
    if psi is not None:
        rep.J_sc = integrate_phase(psi, grid, p) ** p
    w = rx.weights
    rep.total = (w.c_t * rep.J_T + w.c_c * rep.J_C + w.c_n * rep.J_N + w.c_dv * rep.J_DV
                 + w.c_ad * rep.J_ad + w.c_sc * rep.J_sc + rx.c * rep.J_reg)
    return rep


def dose_sensitivity(dose: np.ndarray, rx: Prescription, regions: RegionMap, grid: PhaseGrid,
                     include_dv: bool = True) -> np.ndarray:
    """∂J/∂D 的逐点密度（p = 2）"""
    w = rx.weights
    T, C, N = regions.target, regions.critical, regions.normal
    out = np.zeros_like(dose)
    out[T] += 2.0 * w.c_t * (dose[T] - rx.d0)
    out[C] += 2.0 * w.c_c * np.maximum(dose[C] - rx.dcap_c, 0.0)
    out[N] += 2.0 * w.c_n * np.maximum(dose[N] - rx.dcap_n, 0.0)
    if include_dv and w.c_dv > 0:
        vol = grid.spatial.cell_volumes
        size = float(vol[C].sum())
        excess = dv_fraction(dose, rx, regions, grid) - rx.dv.v_c
        outer = 2.0 * max(excess, 0.0)
        if size > 0 and outer != 0.0:
            out[C] += w.c_dv * outer * ramp_derivative(dose[C] - rx.dv.d_c, rx.epsilon) / size
    return out


# === 计划问题 ===

class PlanningCase:
    """截面、网格、区域、处方与固定源的组合；控制为外照射 g 或内照射 f"""

    def __init__(self, xs: CrossSections, grid: PhaseGrid, regions: RegionMap, rx: Prescription,
                 f: Optional[np.ndarray] = None, g: Optional[np.ndarray] = None,
                 opts: Optional[PlanningOptions] = None):
        self.xs = xs
        self.grid = grid
        self.regions = regions
        self.rx = rx
        self.f = f
        self.g = g
        self.opts = opts or PlanningOptions()
        if rx.mode == "external":
            self.space: ControlSpace = ExternalControl(self, rx.control_support)
        else:
            self.space = InternalControl(self, rx.control_support, rx.reduction)
        self.n_solves = 0

    def with_rx(self, rx: Prescription) -> "PlanningCase":
        return PlanningCase(self.xs, self.grid, self.regions, rx, self.f, self.g, self.opts)

    def control(self, values: np.ndarray) -> Control:
        return Control(values=values, space=self.space)

    def forward(self, values: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        f_ctrl, g_ctrl = self.space.sources(values)
        f = f_ctrl if homogeneous or self.f is None else (self.f if f_ctrl is None else self.f + f_ctrl)
        g = g_ctrl if homogeneous or self.g is None else (self.g if g_ctrl is None else self.g + g_ctrl)
        self.n_solves += 1
        return solve_coupled(self.xs, f, g, self.grid, self.opts.solve).psi

    def adjoint(self, f_star: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """返回 (ψ*, 控制空间中的伴随表示)"""
        self.n_solves += 1
        psi_star = solve_adjoint(self.xs, f_star, self.grid, self.opts.solve).psi
        return psi_star, self.space.restrict(self.space.adjoint_representative(psi_star, f_star))

    def dose(self, psi: np.ndarray) -> np.ndarray:
        return compute_dose(psi, self.xs, self.grid)

    # --- 初始解的跟踪目标 ---

    def tracking_profile(self) -> Tuple[np.ndarray, np.ndarray]:
        """逐节点的 (目标剂量 d_R, 权重 c_R)"""
        d_t, d_c, d_n = self.rx.tracking_targets
        w = self.rx.weights
        labels = self.regions.labels
        target = np.choose(labels, [d_t, d_c, d_n]).astype(float)
        weight = np.choose(labels, [w.c_t, w.c_c, w.c_n]).astype(float)
        return target, weight

    def tracking_objective(self, values: np.ndarray, psi: Optional[np.ndarray] = None) -> float:
        """Σ_R c_R‖Dψ − d_R‖²_R + c‖u‖²"""
        psi = self.forward(values) if psi is None else psi
        dose = self.dose(psi)
        target, weight = self.tracking_profile()
        vol = self.grid.spatial.cell_volumes
        return float(np.sum(weight * (dose - target) ** 2 * vol) + self.rx.c * self.space.inner(values, values))

    def tracking_adjoint_source(self, dose: np.ndarray, homogeneous: bool = False) -> np.ndarray:
        target, weight = self.tracking_profile()
        residual = -dose if homogeneous else target - dose
        return dose_adjoint(weight * residual, self.xs, self.grid)

    def full_objective(self, values: np.ndarray, include_dv: bool = True) -> Tuple[ObjectiveReport, np.ndarray]:
        psi = self.forward(values)
        rx = self.rx if include_dv else self.rx.with_weights(c_dv=0.0)
        report = evaluate_objective(self.dose(psi), rx, self.regions, 2, self.grid, self.control(values), psi)
        return report, psi


@dataclass
class OptimalityResult:
    control: Control
    psi: np.ndarray
    psi_star: np.ndarray
    kkt_residual: float
    complementarity_residual: float
    sign_residual: float = 0.0
    iterations: int = 0
    objective: Optional[ObjectiveReport] = None
    history: List[float] = field(default_factory=list)
    theta: float = 0.0

    def summary(self) -> Dict[str, float]:
        out = {
            'iterations': self.iterations,
            'kkt_residual': self.kkt_residual,
            'complementarity_residual': self.complementarity_residual,
            'sign_residual': self.sign_residual,
        }
        if self.objective is not None:
            out.update(self.objective.as_dict())
        return out


def objective_gradient(case: PlanningCase, control: np.ndarray, p: int = 2, include_dv: bool = True
                       ) -> Tuple[np.ndarray, ObjectiveReport]:
    """J′(u) = −2·(伴随表示) + 2c·u (+ 2c_ad·u₋)，控制空间内积下的梯度"""
    if p != 2:
        raise BadExponent("梯度只对 p = 2 的目标函数定义")
    rx = case.rx if include_dv else case.rx.with_weights(c_dv=0.0)
    psi = case.forward(control)
    dose = case.dose(psi)
    report = evaluate_objective(dose, rx, case.regions, 2, case.grid, case.control(control), psi)
    sens = dose_sensitivity(dose, rx, case.regions, case.grid, include_dv)
    f_star = -0.5 * dose_adjoint(sens, case.xs, case.grid)
    if rx.weights.c_sc > 0:
        f_star = f_star - rx.weights.c_sc * psi
    _, rep = case.adjoint(f_star)
    grad = -2.0 * rep + 2.0 * rx.c * control
    if rx.weights.c_ad > 0:
        grad += 2.0 * rx.weights.c_ad * np.minimum(control, 0.0)
    return case.space.restrict(grad), report


# === 最优性系统的阻尼不动点 ===

def estimate_hessian_norm(case: PlanningCase, iterations: int = 30, seed: int = 0) -> float:
    """幂迭代估计跟踪 Hessian u ↦ −(伴随表示)(D*c_R(−D S u)) 的最大特征值"""
    space = case.space
    rng = np.random.default_rng(seed)
    v = space.restrict(rng.uniform(0.5, 1.0, size=space.shape))
    norm = space.norm(v)
    if norm == 0:
        return 0.0
    v /= norm
    lam = 0.0
    for it in range(iterations):
        psi = case.forward(v, homogeneous=True)
        f_star = case.tracking_adjoint_source(case.dose(psi), homogeneous=True)
        _, rep = case.adjoint(f_star)
        Hv = -rep
        lam_new = space.inner(v, Hv)
        n = space.norm(Hv)
        if n == 0:
            return 0.0
        v = Hv / n
        if abs(lam_new - lam) <= 1e-3 * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
    logger.info(f"跟踪 Hessian 最大特征值估计: λ ≈ {lam:.6g}")
    return max(lam, 0.0)


def _kkt_residuals(space: ControlSpace, u: np.ndarray, rep: np.ndarray, c: float) -> Tuple[float, float, float]:
    """相对残差：驻点 ‖u − (rep/c)₊‖∞、互补 max|u(−rep + cu)|、零集上的符号 max(rep − cu)₊"""
    mask = space.mask
    if not mask.any():
        return 0.0, 0.0, 0.0
    tiny = 1e-300
    rep_inf = float(np.max(np.abs(rep[mask])))
    u_inf = float(np.max(np.abs(u[mask])))
    target = np.maximum(rep, 0.0) / c
    kkt = float(np.max(np.abs(u - target)[mask])) / max(u_inf, float(np.max(target[mask])), tiny)
    comp = float(np.max(np.abs(u * (c * u - rep))[mask])) / max(rep_inf * u_inf, tiny)
    zero = mask & (u == 0)
    sign = float(np.max(np.maximum(rep - c * u, 0.0)[zero])) / max(rep_inf, tiny) if zero.any() else 0.0
    return kkt, comp, sign


def _solve_initial(case: PlanningCase, label: str) -> OptimalityResult:
    opts = case.opts
    rx = case.rx
    space = case.space
    c = rx.c
    if opts.theta == "auto":
        lam = estimate_hessian_norm(case, opts.power_iterations, opts.seed)
        theta = 2.0 / (2.0 + lam / c)
    else:
        theta = float(opts.theta)
    logger.info(f"{label}: 阻尼不动点开始, θ={theta:.4f}, c={c}")

    u = space.zeros()
    history: List[float] = []
    for it in range(1, opts.max_fixed_point + 1):
        psi = case.forward(u)
        f_star = case.tracking_adjoint_source(case.dose(psi))
        psi_star, rep = case.adjoint(f_star)
        update = space.project(rep / c)
        u_new = (1.0 - theta) * u + theta * update
        diff = space.norm(u_new - u)
        scale = space.norm(u_new)
        change = diff / scale if scale > 0 else 0.0
        history.append(change)
        u = u_new
        logger.debug(f"{label} 不动点迭代 {it}: 相对更新 {change:.3e}")
        if change < opts.fixed_point_tol:
            psi = case.forward(u)
            f_star = case.tracking_adjoint_source(case.dose(psi))
            psi_star, rep = case.adjoint(f_star)
            kkt, comp, sign = _kkt_residuals(space, u, rep, c)
            objective = evaluate_objective(case.dose(psi), rx, case.regions, 2, case.grid, case.control(u), psi)
            logger.info(f"{label}收敛: 迭代 {it} 次, 互补残差 {comp:.3e}, 驻点残差 {kkt:.3e}")
            return OptimalityResult(control=case.control(u), psi=psi, psi_star=psi_star, kkt_residual=kkt,
                                    complementarity_residual=comp, sign_residual=sign, iterations=it,
                                    objective=objective, history=history, theta=theta)
    raise NoConvergence(
        f"{label}在 {opts.max_fixed_point} 次迭代内未收敛",
        details={'history_tail': history[-5:], 'theta': theta, 'hint': '请减小 θ 或使用 theta="auto"'}
    )


def solve_initial_external(case: PlanningCase) -> OptimalityResult:
    """ḡ = (1/c)(γ₋ψ*)₊"""
    if not isinstance(case.space, ExternalControl):
        raise ShapeMismatch("solve_initial_external 需要外照射模式的计划问题")
    return _solve_initial(case, "外照射初始解")


def solve_initial_internal(case: PlanningCase) -> OptimalityResult:
    """f̄ = (1/c)(ψ*)₊，按约化方式先对 E 或 S×I 平均"""
    if not isinstance(case.space, InternalControl):
        raise ShapeMismatch("solve_initial_internal 需要内照射模式的计划问题")
    return _solve_initial(case, "内照射初始解")


def solve_initial(case: PlanningCase) -> OptimalityResult:
    if isinstance(case.space, ExternalControl):
        return solve_initial_external(case)
    return solve_initial_internal(case)


# === 投影梯度 ===

@dataclass
class _Descent:
    control: np.ndarray
    report: ObjectiveReport
    iterations: int
    history: List[float]
    stalled: bool = False


def _projected_gradient(case: PlanningCase, init: np.ndarray, include_dv: bool) -> _Descent:
    opts = case.opts
    space = case.space
    u = space.project(init)
    grad, report = objective_gradient(case, u, include_dv=include_dv)
    J = report.total
    history = [J]
    best_u, best_report = u, report
    for it in range(1, opts.pg_max_iter + 1):
        pg = u - space.project(u - grad)
        pg_norm = space.norm(pg)
        if pg_norm < opts.pg_tol * (1.0 + J):
            logger.info(f"投影梯度收敛: 迭代 {it - 1} 次, J={J:.6e}, ‖P∇J‖={pg_norm:.3e}")
            return _Descent(best_u, best_report, it - 1, history)
        alpha = opts.armijo_step
        while True:
            u_new = space.project(u - alpha * grad)
            report_new, _ = case.full_objective(u_new, include_dv)
            if report_new.total <= J + opts.armijo_slope * space.inner(grad, u_new - u):
                break
            alpha *= opts.armijo_factor
            if alpha < opts.min_step:
                logger.warning(f"Armijo 线搜索停滞: 迭代 {it}, J={J:.6e}")
                if it == 1:
                    raise LineSearchStall(
                        f"线搜索步长低于 {opts.min_step}",
                        details={'objective': J, 'projected_gradient': pg_norm}
                    )
                return _Descent(best_u, best_report, it - 1, history, stalled=True)
        u = u_new
        grad, report = objective_gradient(case, u, include_dv=include_dv)
        J = report.total
        history.append(J)
        logger.info(f"投影梯度迭代 {it}: J={J:.6e}, 步长 {alpha:.3g}")
        if J <= best_report.total:
            best_u, best_report = u, report
    return _Descent(best_u, best_report, opts.pg_max_iter, history)


def optimize_projected_gradient(case: PlanningCase, init: np.ndarray, phase: str = "convex") -> OptimalityResult:
    """phase="convex"：c_DV = 0；phase="dv"：加入 Hε 剂量体积项并多起点"""
    opts = case.opts
    if phase not in ("convex", "dv"):
        raise ValueError(f"未知的优化阶段: {phase}")
    if phase == "convex":
        work = case.with_rx(case.rx.with_weights(c_dv=0.0))
        starts = [np.asarray(init, dtype=float)]
    else:
        work = case
        rng = np.random.default_rng(opts.seed)
        base = case.space.project(np.asarray(init, dtype=float))
        amp = opts.perturbation * max(float(np.max(base)), 1e-12)
        starts = [base] + [base + case.space.restrict(amp * rng.uniform(0.0, 1.0, size=base.shape))
                           for _ in range(opts.n_starts - 1)]

    best: Optional[_Descent] = None
    for k, start in enumerate(starts):
        run = _projected_gradient(work, start, include_dv=phase == "dv")
        logger.info(f"起点 {k + 1}/{len(starts)}: J={run.report.total:.6e}")
        if best is None or run.report.total < best.report.total:
            best = run

    u = best.control
    psi = work.forward(u)
    dose = work.dose(psi)
    sens = dose_sensitivity(dose, work.rx, work.regions, work.grid, include_dv=phase == "dv")
    f_star = -0.5 * dose_adjoint(sens, work.xs, work.grid)
    psi_star, rep = work.adjoint(f_star)
    kkt, comp, sign = _kkt_residuals(work.space, u, rep, work.rx.c)
    return OptimalityResult(control=case.control(u), psi=psi, psi_star=psi_star, kkt_residual=kkt,
                            complementarity_residual=comp, sign_residual=sign, iterations=best.iterations,
                            objective=best.report, history=best.history)
