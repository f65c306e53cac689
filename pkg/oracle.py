#!/usr/bin/env python3
"""
独立校验
离散纵标上的类比蒙特卡罗剂量（Woodcock 追踪 + 径迹长度计数）、
球域正则性探针与 Green 恒等式检查
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from cross_sections import CrossSections, validate
from discretization import N_SPECIES, AnalyticField, PhaseGrid, check_field
from errors import BadExponent, NegativeData, SubCriticalViolation, WrongConfiguration, ZeroSource
from geometry import Ball
from runtime import parallel_map

CHUNK_PARTICLES = 8192
MIN_CHUNKS = 16
MAX_EVENTS = 100000
BIRTH_NUDGE = 1e-9


@dataclass
class McResult:
    dose: np.ndarray
    stderr: np.ndarray
    n_particles: int
    seed: int
    n_chunks: int = 0


class _Tracker:
    """单个分块内的粒子历史：出生、Woodcock 飞行、碰撞抽样与径迹计数"""

    def __init__(self, xs: CrossSections, grid: PhaseGrid, f: Optional[np.ndarray], g: Optional[np.ndarray]):
        self.xs = xs
        self.grid = grid
        self.dom = grid.domain
        self.sigma = xs.sigma_table
        self.kappa = xs.kappa_table
        self.sigma_max = self.sigma.max(axis=1)
        self.omega = grid.angular.nodes
        self.sub_step = 0.25 * grid.spatial.spacing
        self.node_of_flat = grid.spatial.node_of_cell.ravel()
        wq = grid.angular.weights
        wm = grid.energy.weights

        self.vol_p = None if f is None else (f * grid.volume_weights[None]).ravel()
        self.bnd_p = None if g is None else (g * grid.boundary_weights("inflow")[None]).ravel()
        self.mass_f = 0.0 if self.vol_p is None else float(self.vol_p.sum())
        self.mass_g = 0.0 if self.bnd_p is None else float(self.bnd_p.sum())

        # 每种入射粒子的散射选项：通道（强度按分区）与稠密核
        self.channels = []
        for ch, A, B, _ in xs.operator(grid).channels:
            cdf_a = np.cumsum(A * wq[None, :], axis=1)
            cdf_b = np.cumsum(B * wm[None, :], axis=1)
            self.channels.append((ch, cdf_a / cdf_a[:, -1:], cdf_b / cdf_b[:, -1:]))
        self.table_rows = None
        if xs.table is not None:
            # (k, q_in, m_in) → 在 (j, q, m) 上的权重
            weighted = xs.table * wq[None, None, None, :, None, None] * wm[None, None, None, None, None, :]
            flat = np.transpose(weighted, (0, 2, 4, 1, 3, 5)).reshape(N_SPECIES, len(wq), len(wm), -1)
            self.table_rows = flat.sum(axis=-1)
            self.table_cdf = np.cumsum(flat, axis=-1) / np.maximum(self.table_rows[..., None], 1e-300)

    @property
    def total_mass(self) -> float:
        return self.mass_f + self.mass_g

    # --- 出生 ---

    def _volume_births(self, n: int, rng: np.random.Generator):
        grid = self.grid
        flat = rng.choice(len(self.vol_p), size=n, p=self.vol_p / self.mass_f)
        j, node, q, m = np.unravel_index(flat, grid.shape)
        centers = grid.spatial.nodes[node]
        X = centers + grid.spatial.h * (rng.random((n, 3)) - 0.5)
        bad = ~self.dom.contains_points(X)
        while bad.any():
            X[bad] = centers[bad] + grid.spatial.h * (rng.random((int(bad.sum()), 3)) - 0.5)
            bad = ~self.dom.contains_points(X)
        return X, j, q, m

    def _boundary_births(self, n: int, rng: np.random.Generator):
        grid = self.grid
        b = grid.boundary
        flat = rng.choice(len(self.bnd_p), size=n, p=self.bnd_p / self.mass_g)
        j, s, q, m = np.unravel_index(flat, grid.boundary_shape)
        if b.kind == "ball":
            ball: Ball = self.dom
            z = b.z_bounds[s, 0] + (b.z_bounds[s, 1] - b.z_bounds[s, 0]) * rng.random(n)
            phi = b.phi_bounds[s, 0] + (b.phi_bounds[s, 1] - b.phi_bounds[s, 0]) * rng.random(n)
            r = np.sqrt(np.maximum(1.0 - z ** 2, 0.0))
            nrm = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
            Y = ball.c + ball.radius * nrm
        else:
            Y = b.cell_lo[s] + (b.cell_hi[s] - b.cell_lo[s]) * rng.random((n, 3))
            nrm = b.normals[s]
        X = Y - BIRTH_NUDGE * self.dom.diameter * nrm
        return X, j, q, m

    def births(self, n: int, rng: np.random.Generator):
        n_f = int(rng.binomial(n, self.mass_f / self.total_mass)) if self.mass_g > 0 else n
        parts = []
        if n_f > 0:
            parts.append(self._volume_births(n_f, rng))
        if n - n_f > 0:
            parts.append(self._boundary_births(n - n_f, rng))
        X = np.concatenate([p[0] for p in parts])
        j, q, m = (np.concatenate([p[k] for p in parts]).astype(np.int64) for k in (1, 2, 3))
        return X, j, q, m

    # --- 径迹计数 ---

    def tally(self, X, W, seg, j, out: np.ndarray):
        n_sub = np.maximum(1, np.ceil(seg / self.sub_step).astype(np.int64))
        ds = seg / n_sub
        owner = np.repeat(np.arange(len(X)), n_sub)
        start = np.cumsum(n_sub) - n_sub
        k = np.arange(int(n_sub.sum())) - np.repeat(start, n_sub)
        P = X[owner] + ((k + 0.5) * ds[owner])[:, None] * W[owner]
        region = self.xs.region_of(P)
        weight = self.kappa[j[owner], region] * ds[owner]
        flat = self.grid.spatial.cell_of(P)
        node = np.where(flat >= 0, self.node_of_flat[np.maximum(flat, 0)], -1)
        ok = node >= 0
        out += np.bincount(node[ok], weights=weight[ok], minlength=len(out))

    # --- 碰撞 ---

    def scatter(self, X, j, q, m, rng: np.random.Generator):
        """返回 (存活掩码, 新 j, 新 q, 新 m)"""
        P = len(X)
        region = self.xs.region_of(X)
        sigma = self.sigma[j, region]
        options = [np.where(ch.src == j, ch.strength[region], 0.0) for ch, _, _ in self.channels]
        if self.table_rows is not None:
            options.append(self.table_rows[j, q, m])
        if not options:
            return np.zeros(P, dtype=bool), j, q, m
        weights = np.stack(options, axis=1)
        total = weights.sum(axis=1)
        survive = rng.random(P) * sigma < total
        cdf = np.cumsum(weights, axis=1) / np.maximum(total[:, None], 1e-300)
        pick = np.minimum((cdf < rng.random(P)[:, None]).sum(axis=1), weights.shape[1] - 1)
        u_ang = rng.random(P)
        u_en = rng.random(P)
        new_j, new_q, new_m = j.copy(), q.copy(), m.copy()
        for k, (ch, cdf_a, cdf_b) in enumerate(self.channels):
            sel = survive & (pick == k)
            if sel.any():
                new_j[sel] = ch.dst
                new_q[sel] = np.minimum((cdf_a[q[sel]] < u_ang[sel, None]).sum(axis=1), cdf_a.shape[1] - 1)
                new_m[sel] = np.minimum((cdf_b[m[sel]] < u_en[sel, None]).sum(axis=1), cdf_b.shape[1] - 1)
        if self.table_rows is not None:
            sel = survive & (pick == len(self.channels))
            if sel.any():
                rows = self.table_cdf[j[sel], q[sel], m[sel]]
                flat = np.minimum((rows < u_ang[sel, None]).sum(axis=1), rows.shape[1] - 1)
                new_j[sel], new_q[sel], new_m[sel] = np.unravel_index(
                    flat, (N_SPECIES, self.grid.angular.size, self.grid.energy.size))
        return survive, new_j, new_q, new_m

    def run(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.zeros(self.grid.spatial.size)
        X, j, q, m = self.births(n, rng)
        events = 0
        while len(X):
            events += 1
            if events > MAX_EVENTS:
                logger.warning(f"{len(X)} 个粒子超过 {MAX_EVENTS} 次事件，强制终止")
                break
            W = self.omega[q]
            s = rng.exponential(size=len(X)) / self.sigma_max[j]
            t_exit = self.dom.escape_times_forward(X, W)
            seg = np.minimum(s, t_exit)
            self.tally(X, W, seg, j, out)
            inside = s < t_exit
            X, W, j, q, m, s = X[inside], W[inside], j[inside], q[inside], m[inside], s[inside]
            X = X + s[:, None] * W
            region = self.xs.region_of(X)
            real = rng.random(len(X)) * self.sigma_max[j] < self.sigma[j, region]
            alive = ~real
            if real.any():
                survive, nj, nq, nm = self.scatter(X[real], j[real], q[real], m[real], rng)
                idx = np.flatnonzero(real)
                alive[idx[survive]] = True
                j[idx], q[idx], m[idx] = nj, nq, nm
            X, j, q, m = X[alive], j[alive], q[alive], m[alive]
        return out


def _chunk_sizes(n_particles: int) -> List[int]:
    n_chunks = max(MIN_CHUNKS, int(np.ceil(n_particles / CHUNK_PARTICLES)))
    base, extra = divmod(n_particles, n_chunks)
    return [base + (1 if k < extra else 0) for k in range(n_chunks)]


def _check_source(values: Optional[np.ndarray], grid: PhaseGrid, boundary: bool, name: str) -> Optional[np.ndarray]:
    if values is None:
        return None
    values = check_field(values, grid, boundary=boundary)
    if np.any(values < 0):
        raise NegativeData(f"蒙特卡罗源 {name} 出现负值")
    return values if np.any(values > 0) else None


def mc_transport_dose(xs: CrossSections, f: Optional[np.ndarray], g: Optional[np.ndarray], grid: PhaseGrid,
                      n_particles: int, seed: int, threads: int = 1) -> McResult:
    """类比蒙特卡罗：按 (seed, 分块) 的 Philox 计数器生成器，结果与线程数无关"""
    report = validate(xs, grid)
    if not report.satisfied:
        raise SubCriticalViolation("次临界条件不满足，粒子历史可能不终止",
                                   details={'c_row': report.c_row, 'c_col': report.c_col})
    f = _check_source(f, grid, False, "f")
    g = _check_source(g, grid, True, "g")
    N = grid.spatial.size
    if f is None and g is None:
        logger.warning("源项全为零，返回零剂量")
        return McResult(dose=np.zeros(N), stderr=np.zeros(N), n_particles=n_particles, seed=seed)

    tracker = _Tracker(xs, grid, f, g)
    if tracker.total_mass <= 0:
        raise ZeroSource("源项在入流/体积测度下的总权重为零（例如边界数据只落在出流方向）")

    sizes = _chunk_sizes(n_particles)
    logger.info(f"蒙特卡罗开始: {n_particles} 个粒子, {len(sizes)} 个分块, 种子 {seed}")

    def run_chunk(k: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, k], dtype=np.uint64)))
        return tracker.run(sizes[k], rng) if sizes[k] > 0 else np.zeros(N)

    tallies = parallel_map(run_chunk, range(len(sizes)), threads)
    vol = np.maximum(grid.spatial.cell_volumes, 1e-300)
    counts = np.array(sizes, dtype=float)
    per_chunk = np.stack([t * tracker.total_mass / max(c, 1.0) / vol for t, c in zip(tallies, counts)])
    total = np.sum(np.stack(tallies), axis=0)
    dose = total * tracker.total_mass / n_particles / vol
    used = counts > 0
    stderr = (np.std(per_chunk[used], axis=0, ddof=1) / np.sqrt(used.sum())
              if used.sum() > 1 else np.zeros(N))
    logger.info(f"蒙特卡罗完成: 平均剂量 {dose.mean():.6e}, 平均标准误差 {stderr.mean():.3e}")
    return McResult(dose=dose, stderr=stderr, n_particles=n_particles, seed=seed, n_chunks=len(sizes))


# === 正则性探针 ===

@dataclass
class ProbeResult:
    p: int
    eps: List[float]
    norms: List[float]
    ratios: List[float] = field(default_factory=list)
    increment_ratio: float = 0.0
    threshold: float = 0.0
    verdict: str = "BOUNDED"

    def table(self) -> List[Tuple[float, float]]:
        return list(zip(self.eps, self.norms))


def _graded_edges(a: float, b: float, finest: float) -> np.ndarray:
    """[a, b] 上向 b 几何加密（比 2）的分段点，最细段长 finest"""
    edges = [b]
    width = finest
    while edges[-1] - width > a:
        edges.append(edges[-1] - width)
        width *= 2.0
    edges.append(a)
    return np.array(edges[::-1])


def _panel_rule(edges: np.ndarray, order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)
    weights = 0.5 * (hi - lo) * w[None, :]
    return nodes.ravel(), weights.ravel()


def _derivative_power_integral(p: int, s_max: float, radius: float, sigma: float, order: int) -> float:
    """∫_{|x|<s_max}∫_S |∂ψ/∂x₁|ᵖ，ψ = (1 − e^{−Σt})/Σ。
    被积函数只依赖 s = |x| 与 μ = x̂·ω；对 x₁ 方向的旋转平均给出因子 1/(p+1)"""
    delta_min = np.sqrt(max(radius ** 2 - s_max ** 2, 0.0))
    s_nodes, s_w = _panel_rule(_graded_edges(0.0, s_max, max(0.25 * (radius - s_max), 1e-12)), order)
    total = 0.0
    for s, ws in zip(s_nodes, s_w):
        delta = np.sqrt(radius ** 2 - s ** 2)
        finest = max(0.25 * delta / max(s, 1e-300), 0.25 * delta_min / radius, 1e-14)
        right = _graded_edges(0.0, 1.0, 1.0)
        if finest < 1.0:
            right = np.concatenate([[0.0], finest * 2.0 ** np.arange(int(np.ceil(np.log2(1.0 / finest))))])
            right = np.unique(np.append(right[right < 1.0], 1.0))
        edges = np.unique(np.concatenate([-right[::-1], right]))
        mu, wmu = _panel_rule(edges, order)
        R = np.sqrt(s ** 2 * mu ** 2 + delta ** 2)
        t = s * mu + R
        grad = np.sqrt(1.0 + s ** 2 * (1.0 - mu ** 2) / R ** 2)
        integrand = (np.exp(-sigma * t) * grad) ** p
        total += ws * s ** 2 * float(np.sum(wmu * integrand))
    return 8.0 * np.pi ** 2 / (p + 1) * total


def regularity_probe(p: int, eps_levels: Sequence[float], resolution: int = 16, domain=None,
                     sigma: float = 1.0, component: int = 0) -> ProbeResult:
    """‖∂ψ/∂xⱼ‖_{Lᵖ(G_ε×S)}，G_ε = B(c, r − ε)；按归一化的壳层增量判定发散"""
    if p not in (1, 2, 3):
        raise BadExponent(f"正则性探针只支持 p ∈ {{1, 2, 3}}，当前 p={p}")
    domain = Ball() if domain is None else domain
    if not isinstance(domain, Ball):
        raise WrongConfiguration("正则性探针需要球域")
    if sigma <= 0:
        raise WrongConfiguration("正则性探针需要 Σ > 0")
    if component not in (0, 1, 2):
        raise WrongConfiguration(f"导数分量必须为 0..2: {component}")
    eps = [float(e) for e in eps_levels]
    if len(eps) < 2 or any(e <= 0 or e >= domain.radius for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise WrongConfiguration("ε 序列必须严格递减且位于 (0, r) 内，至少两项")

    r = domain.radius
    powers = [_derivative_power_integral(p, r - e, r, sigma, resolution) for e in eps]
    norms = [float(v ** (1.0 / p)) for v in powers]
    ratios = [norms[k + 1] / norms[k] for k in range(len(norms) - 1)]
    result = ProbeResult(p=p, eps=eps, norms=norms, ratios=ratios)

    # 对数发散时每个 ε 十倍程的增量趋于常数；收敛时至少按 ε^{1/2} 衰减
    if len(eps) >= 3:
        inc = [(powers[k + 1] - powers[k]) / np.log(eps[k] / eps[k + 1]) for k in range(len(eps) - 1)]
        rho = float(np.exp(np.mean(np.log(np.array(eps[1:]) / np.array(eps[:-1])))))
        result.increment_ratio = float(inc[-1] / inc[-2]) if inc[-2] > 0 else 0.0
        result.threshold = 0.5 * (1.0 + np.sqrt(rho))
        result.verdict = "DIVERGENT" if result.increment_ratio > result.threshold else "BOUNDED"
    logger.info(f"正则性探针 p={p}: 范数 {['%.4g' % v for v in norms]}, 判定 {result.verdict}")
    return result


# === Green 恒等式 ===

def check_green_identity(psi: AnalyticField, v: AnalyticField, grid: PhaseGrid) -> float:
    """|∫(ω·∇ψ)v + ∫(ω·∇v)ψ − ∮(ω·ν)ψv| / (|LHS| + |RHS| + 1)"""
    W = grid.angular.nodes
    E = grid.energy.nodes
    X = grid.spatial.nodes
    p_val, p_dir = psi.evaluate(X, W, E)
    v_val, v_dir = v.evaluate(X, W, E)
    lhs = float(np.sum((p_dir * v_val + v_dir * p_val) * grid.volume_weights))
    b = grid.boundary
    pb, _ = psi.evaluate(b.points, W, E)
    vb, _ = v.evaluate(b.points, W, E)
    signed = (b.areas[:, None] * b.mu * grid.angular.weights[None, :])[:, :, None] * grid.energy.weights
    rhs = float(np.sum(signed * pb * vb))
    residual = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1.0)
    logger.debug(f"Green 恒等式: LHS={lhs:.6e}, RHS={rhs:.6e}, 残差 {residual:.3e}")
    return residual
