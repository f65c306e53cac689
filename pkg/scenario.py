#!/usr/bin/env python3
"""
场景配置
TOML 场景文件的 pydantic 模式、加载/序列化，以及从场景构建网格、截面、源项与计划问题
"""

import hashlib
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import tomli_w
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from cross_sections import Channel, CrossSections, Material
from discretization import N_SPECIES, PhaseGrid, boundary_patch, build_phase_grid
from errors import ConfigError
from geometry import Ball, Box, Domain, Region
from planning import PlanningCase, PlanningOptions, Prescription, RegionMap
from timedep import BoundaryHistory, SpeciesKinematics, TimeGrid
from transport import SolveOptions

PerSpecies = Union[float, Tuple[float, float, float]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _nonneg(value: PerSpecies, name: str) -> PerSpecies:
    values = value if isinstance(value, (tuple, list)) else (value,)
    if min(values) < 0:
        raise ValueError(f"{name} 必须非负")
    return value


class DomainSection(_Section):
    kind: Literal["ball", "box"] = "ball"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = Field(default=1.0, gt=0)
    lo: Tuple[float, float, float] = (-1.0, -1.0, -1.0)
    hi: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def build(self) -> Domain:
        if self.kind == "ball":
            return Ball(center=self.center, radius=self.radius)
        return Box(lo=self.lo, hi=self.hi)


class GridSection(_Section):
    nx: int = Field(default=16, ge=2)
    n_polar: int = Field(default=4, ge=2)
    n_azimuth: int = Field(default=8, ge=2)
    n_energy: int = Field(default=2, ge=1)


class EnergySection(_Section):
    e0: float = Field(default=0.0, ge=0)
    em: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _check_range(self):
        if self.em <= self.e0:
            raise ValueError("能量区间要求 em > e0")
        return self


class RegionSection(_Section):
    kind: Literal["ball", "box"] = "ball"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = Field(default=0.5, gt=0)
    lo: Tuple[float, float, float] = (-0.5, -0.5, -0.5)
    hi: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    label: Literal["target", "critical", "normal"] = "normal"

    def build(self, name: str) -> Region:
        shape = Ball(center=self.center, radius=self.radius) if self.kind == "ball" else Box(lo=self.lo, hi=self.hi)
        return Region(name=name, shape=shape, label=self.label)


class MaterialSection(_Section):
    sigma_a: PerSpecies = 1.0
    sigma_s: PerSpecies = 0.0
    kappa: PerSpecies = 1.0

    @field_validator("sigma_a", "sigma_s", "kappa")
    @classmethod
    def _check_nonneg(cls, v, info):
        return _nonneg(v, info.field_name)


class TransferSection(_Section):
    src: int = Field(ge=0, lt=N_SPECIES)
    dst: int = Field(ge=0, lt=N_SPECIES)
    strength: float = Field(ge=0)
    region_strength: Dict[str, float] = Field(default_factory=dict)
    angular: Literal["isotropic", "screened"] = "isotropic"
    g: float = Field(default=0.0, ge=0, lt=1)
    energy: Literal["uniform", "elastic", "downscatter"] = "uniform"


class XsSection(MaterialSection):
    """背景材料 + 分区覆盖；σ_s 生成对角散射通道。
    kernel: isotropic 各向同性；screened 屏蔽前向（xs.g）；transfer 在对角通道（g > 0 时屏蔽）之外加入 [[xs.transfer]] 种类转移通道"""
    kernel: Literal["isotropic", "screened", "transfer"] = "isotropic"
    g: float = Field(default=0.0, ge=0, lt=1)
    energy: Literal["uniform", "elastic", "downscatter"] = "uniform"
    region: Dict[str, MaterialSection] = Field(default_factory=dict)
    transfer: List[TransferSection] = Field(default_factory=list)


class VolumeSourceSection(_Section):
    kind: Literal["none", "constant", "gaussian", "region"] = "none"
    value: float = Field(default=1.0, ge=0)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: float = Field(default=0.25, gt=0)
    region: Optional[str] = None
    species: List[int] = Field(default_factory=lambda: [0, 1, 2])


class BoundarySourceSection(_Section):
    kind: Literal["none", "constant", "patch"] = "none"
    value: float = Field(default=1.0, ge=0)
    patch_center: Optional[Tuple[float, float, float]] = None
    patch_radius: Optional[float] = Field(default=None, gt=0)
    cone_axis: Optional[Tuple[float, float, float]] = None
    cone_half_angle: Optional[float] = Field(default=None, gt=0, le=180)
    energy_window: Optional[Tuple[float, float]] = None
    species: List[int] = Field(default_factory=lambda: [0, 1, 2])
    profile: Literal["constant", "ramp"] = "constant"


class SourcesSection(_Section):
    f: VolumeSourceSection = Field(default_factory=VolumeSourceSection)
    g: BoundarySourceSection = Field(default_factory=BoundarySourceSection)


class KinematicsSection(_Section):
    masses: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("masses")
    @classmethod
    def _check_masses(cls, v):
        if min(v) <= 0:
            raise ValueError("质量必须为正")
        return v


class TimeSection(_Section):
    T: float = Field(default=1.0, gt=0)
    n_steps: int = Field(default=10, ge=1)
    n0: int = Field(default=12, ge=1)
    boundary_coupling: Literal["inflow", "lift"] = "inflow"


class RxSection(Prescription):
    region_map: Optional[str] = None


class RunSection(_Section):
    name: str = "scenario"
    seed: int = 0
    out: str = "output"
    n_particles: int = Field(default=100000, ge=1)
    threads: Optional[int] = Field(default=None, ge=1)


class Scenario(_Section):
    domain: DomainSection = Field(default_factory=DomainSection)
    grid: GridSection = Field(default_factory=GridSection)
    energy: EnergySection = Field(default_factory=EnergySection)
    regions: Dict[str, RegionSection] = Field(default_factory=dict)
    xs: XsSection = Field(default_factory=XsSection)
    sources: SourcesSection = Field(default_factory=SourcesSection)
    kinematics: KinematicsSection = Field(default_factory=KinematicsSection)
    time: TimeSection = Field(default_factory=TimeSection)
    rx: Optional[RxSection] = None
    solver: SolveOptions = Field(default_factory=SolveOptions)
    planning: PlanningOptions = Field(default_factory=PlanningOptions)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _check_names(self):
        for name in self.xs.region:
            if name not in self.regions:
                raise ValueError(f"[xs.region.{name}] 引用了未定义的子区域")
        for transfer in self.xs.transfer:
            for name in transfer.region_strength:
                if name not in self.regions:
                    raise ValueError(f"转移通道引用了未定义的子区域 {name}")
        if self.xs.kernel == "transfer" and not self.xs.transfer:
            raise ValueError("xs.kernel = 'transfer' 需要至少一个 [[xs.transfer]]")
        if self.xs.transfer and self.xs.kernel != "transfer":
            raise ValueError("[[xs.transfer]] 需要 xs.kernel = 'transfer'")
        if self.sources.f.kind == "region" and self.sources.f.region not in self.regions:
            raise ValueError("sources.f.kind = 'region' 需要已定义的 region")
        return self

    def to_dict(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        """线程数不影响结果，不计入哈希"""
        data = self.to_dict()
        data['solver'].pop('threads', None)
        data['run'].pop('threads', None)
        return hashlib.sha256(tomli_w.dumps(data).encode("utf-8")).hexdigest()


# === 加载 ===

_POSITION = re.compile(r"line (\d+), column (\d+)")


def parse_scenario(text: str) -> Scenario:
    """解析 TOML 文本；语法错误带行列号，模式错误带键路径"""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        line = getattr(e, "lineno", None)
        column = getattr(e, "colno", None)
        if line is None:
            match = _POSITION.search(str(e))
            if match:
                line, column = int(match.group(1)), int(match.group(2))
        raise ConfigError(f"TOML 语法错误: {e}", line=line, column=column)
    return scenario_from_dict(data)


def scenario_from_dict(data: dict) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        problems = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        raise ConfigError("场景校验失败: " + "; ".join(problems), details={'errors': problems})


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"场景文件不存在: {path}")
    scenario = parse_scenario(path.read_text(encoding="utf-8"))
    logger.info(f"已加载场景 {scenario.run.name}: {path}")
    return scenario


# === 构建 ===

@dataclass
class Case:
    """由场景构建出的数值对象"""
    scenario: Scenario
    domain: Domain
    grid: PhaseGrid
    regions: List[Region]
    xs: CrossSections
    f: Optional[np.ndarray]
    g: Optional[np.ndarray]

    @property
    def kinematics(self) -> SpeciesKinematics:
        return SpeciesKinematics(self.scenario.kinematics.masses)

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.scenario.time.T, self.scenario.time.n_steps)

    @property
    def history(self) -> Optional[BoundaryHistory]:
        if self.g is None:
            return None
        return BoundaryHistory(self.g, self.scenario.sources.g.profile)

    def region_map(self) -> RegionMap:
        rx = self.scenario.rx
        if rx is not None and rx.region_map:
            return RegionMap.from_csv(rx.region_map, self.grid)
        return RegionMap.from_regions(self.regions, self.grid)

    def planning_case(self) -> PlanningCase:
        rx = self.scenario.rx
        if rx is None:
            raise ConfigError("规划命令需要 [rx] 处方段")
        prescription = Prescription.model_validate(rx.model_dump(exclude={"region_map"}))
        opts = self.scenario.planning.model_copy(update={'solve': self.scenario.solver})
        return PlanningCase(self.xs, self.grid, self.region_map(), prescription, self.f, self.g, opts)


def build_cross_sections(sc: Scenario, regions: List[Region]) -> CrossSections:
    names = [r.name for r in regions]
    sections = [sc.xs] + [sc.xs.region.get(name, sc.xs) for name in names]
    materials = [Material(sigma_a=m.sigma_a, sigma_s=m.sigma_s, kappa=m.kappa) for m in sections]
    screened = sc.xs.kernel == "screened" or (sc.xs.kernel == "transfer" and sc.xs.g > 0)
    diagonal = "screened" if screened else "isotropic"
    channels = []
    sigma_s = np.stack([m.sigma_s for m in materials], axis=1)
    for j in range(N_SPECIES):
        if np.any(sigma_s[j] > 0):
            channels.append(Channel(src=j, dst=j, strength=sigma_s[j], angular=diagonal,
                                    g=sc.xs.g, energy=sc.xs.energy))
    for t in sc.xs.transfer:
        strength = np.full(len(materials), t.strength)
        for name, value in t.region_strength.items():
            strength[names.index(name) + 1] = value
        channels.append(Channel(src=t.src, dst=t.dst, strength=strength, angular=t.angular, g=t.g,
                                energy=t.energy))
    return CrossSections(regions, materials, channels)


def build_volume_source(sec: VolumeSourceSection, grid: PhaseGrid, regions: List[Region]) -> Optional[np.ndarray]:
    if sec.kind == "none" or sec.value == 0:
        return None
    X = grid.spatial.nodes
    if sec.kind == "constant":
        spatial = np.full(len(X), sec.value)
    elif sec.kind == "gaussian":
        r2 = np.sum((X - np.asarray(sec.center)) ** 2, axis=1)
        spatial = sec.value * np.exp(-0.5 * r2 / sec.width ** 2)
    else:
        region = next(r for r in regions if r.name == sec.region)
        spatial = sec.value * region.shape.contains_points(X).astype(float)
    species = np.isin(np.arange(N_SPECIES), sec.species).astype(float)
    return np.broadcast_to(species[:, None, None, None] * spatial[None, :, None, None], grid.shape).copy()


def build_boundary_source(sec: BoundarySourceSection, grid: PhaseGrid) -> Optional[np.ndarray]:
    if sec.kind == "none" or sec.value == 0:
        return None
    if sec.kind == "constant":
        mask = boundary_patch(grid)
    else:
        mask = boundary_patch(grid, sec.patch_center, sec.patch_radius, sec.cone_axis, sec.cone_half_angle,
                              sec.energy_window)
    species = np.isin(np.arange(N_SPECIES), sec.species)
    return sec.value * (species[:, None, None, None] & mask[None]).astype(float)


def build_case(sc: Scenario) -> Case:
    domain = sc.domain.build()
    grid = build_phase_grid(domain, sc.grid.nx, sc.grid.n_polar, sc.grid.n_azimuth, sc.grid.n_energy,
                            sc.energy.e0, sc.energy.em)
    regions = [sec.build(name) for name, sec in sc.regions.items()]
    xs = build_cross_sections(sc, regions)
    f = build_volume_source(sc.sources.f, grid, regions)
    g = build_boundary_source(sc.sources.g, grid)
    logger.info(f"场景 {sc.run.name}: {sc.domain.kind}, nx={sc.grid.nx}, 子区域 {len(regions)}, "
                f"体源 {sc.sources.f.kind}, 边界源 {sc.sources.g.kind}")
    return Case(scenario=sc, domain=domain, grid=grid, regions=regions, xs=xs, f=f, g=g)
