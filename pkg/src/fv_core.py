#!/usr/bin/env python3
"""
構造格子有限体積法による輸送方程式の離散化

一様な 2 次元デカルト格子上で、陰的 Euler 法の 1 ステップ分の線形システム
(A, b) を組み立て、残差 R = A U - b とヤコビアンを提供する。

対象は d_t u + (1/2) div(u u) = nu lap(u)。対流流束は風上側の速度で分割する:
    O_f = (rho/2) |A_f| max(u_lin,P . n_f, 0)   (流出、自セルの値を運ぶ)
    I_f = (rho/2) |A_f| min(u_lin,N . n_f, 0)   (流入、隣接セルの値を運ぶ)
面の流束 O_f phi_P + I_f phi_N は両側のセルで符号が逆になる (保存形)。

正規化: 各セルの式を dt / V_p 倍した形で保存する。
    A_pp = rho + dt/V_p * (sum_f O_f + sum_f D_f) - dt * S_p
    A_pq = dt/V_p * (I_f - D_f)
    b_p  = rho * u^n_p + dt * S_u + dt/V_p * sum_{境界面} D_f * u_b + 補正
ここで D_f = rho * nu * |A_f| / d_f。A は列和 >= rho の M 行列になる。
linear_upwind の遅延補正は面ごとに反対称な流束として b に入れ、局所の
最大・最小を超えないよう面ごとに制限する (保存性は保たれる)。
nu = 0、対流速度 0、S_p = 0 のとき A = rho * I、b = rho * u^n となる。

未知数の並び: 成分ブロック順 (u_x の全セル、続いて u_y の全セル)、
セル番号 p = j * nx + i (x 方向が最速)。
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix

from linalg import DEFAULT_TOL, SolverConvergenceError, build_csr, solve_sparse

logger = logging.getLogger(__name__)

BOUNDARY = -1
DIRECTIONS = ("E", "W", "N", "S")
OPPOSITE = np.array([1, 0, 3, 2])
NORMALS = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

CONVECTION_SCHEMES = ("upwind", "linear_upwind")
DIFFUSION_SCHEMES = ("central",)
TIME_SCHEMES = ("implicit_euler",)
LINEARIZATIONS = ("mixed", "explicit")

# d_t u + CONVECTIVE_FACTOR * div(u u)
CONVECTIVE_FACTOR = 0.5


@dataclass(frozen=True, eq=False)
class Grid:
    """一様 2 次元デカルト格子 (境界面はすべて Dirichlet)"""
    nx: int
    ny: int
    lx: float
    ly: float
    dx: float
    dy: float
    cell_volume: float
    face_area: np.ndarray      # (4,) E/W/N/S 面の面積 (2 次元なので長さ)
    face_distance: np.ndarray  # (4,) 隣接セル中心までの距離
    neighbors: np.ndarray      # (n_cells, 4) 隣接セル番号、境界は BOUNDARY

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def cell_centers(self) -> np.ndarray:
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        xs = (i + 0.5) * self.dx
        ys = (j + 0.5) * self.dy
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def outward_area_vectors(self) -> np.ndarray:
        """各セル共通の外向き面積ベクトル (4, 2)"""
        return NORMALS * self.face_area[:, None]

    def boundary_mask(self) -> np.ndarray:
        return self.neighbors == BOUNDARY

    def stencil_cells(self, radius: int) -> np.ndarray:
        """|di| + |dj| <= radius のひし形ステンシル (n_cells, 1 + 2r(r+1))、範囲外は BOUNDARY"""
        i = np.tile(np.arange(self.nx), self.ny)
        j = np.repeat(np.arange(self.ny), self.nx)
        columns = [j * self.nx + i]
        for di in range(-radius, radius + 1):
            for dj in range(-radius, radius + 1):
                if (di, dj) == (0, 0) or abs(di) + abs(dj) > radius:
                    continue
                ii = i + di
                jj = j + dj
                inside = (ii >= 0) & (ii < self.nx) & (jj >= 0) & (jj < self.ny)
                columns.append(np.where(inside, jj * self.nx + ii, BOUNDARY))
        return np.stack(columns, axis=1)

    def to_dict(self) -> Dict:
        return {
            "nx": self.nx, "ny": self.ny, "lx": self.lx, "ly": self.ly,
            "dx": self.dx, "dy": self.dy, "cell_volume": self.cell_volume,
            "face_area": self.face_area.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Grid":
        return build_grid(int(data["nx"]), int(data["ny"]), float(data["lx"]), float(data["ly"]))


def build_grid(nx: int, ny: int, lx: float, ly: float) -> Grid:
    """nx * ny セルの一様格子を作成"""
    if int(nx) != nx or int(ny) != ny:
        raise ValueError("nx and ny must be integers")
    nx, ny = int(nx), int(ny)
    if nx < 2 or ny < 2:
        raise ValueError(f"Grid needs at least 2x2 cells, got {nx}x{ny}")
    if not (lx > 0 and ly > 0) or not np.isfinite(lx) or not np.isfinite(ly):
        raise ValueError(f"Domain lengths must be positive, got lx={lx}, ly={ly}")

    dx = lx / nx
    dy = ly / ny
    i = np.tile(np.arange(nx), ny)
    j = np.repeat(np.arange(ny), nx)
    idx = j * nx + i
    neighbors = np.stack([
        np.where(i < nx - 1, idx + 1, BOUNDARY),
        np.where(i > 0, idx - 1, BOUNDARY),
        np.where(j < ny - 1, idx + nx, BOUNDARY),
        np.where(j > 0, idx - nx, BOUNDARY),
    ], axis=1)
    neighbors.setflags(write=False)
    face_area = np.array([dy, dy, dx, dx])
    face_area.setflags(write=False)
    face_distance = np.array([dx, dx, dy, dy])
    face_distance.setflags(write=False)
    return Grid(nx=nx, ny=ny, lx=float(lx), ly=float(ly), dx=dx, dy=dy,
                cell_volume=dx * dy, face_area=face_area,
                face_distance=face_distance, neighbors=neighbors)


@dataclass(frozen=True)
class TransportConfig:
    """輸送方程式の物性値と離散化スキーム"""
    rho: float = 1.0
    nu: float = 0.01
    dt: float = 0.001
    su: float = 0.0
    sp: float = 0.0
    convection_scheme: str = "linear_upwind"
    diffusion_scheme: str = "central"
    time_scheme: str = "implicit_euler"
    linearization: str = "mixed"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.nu >= 0:
            raise ValueError(f"nu must be non-negative, got {self.nu}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.convection_scheme not in CONVECTION_SCHEMES:
            raise ValueError(f"Unknown convection_scheme: {self.convection_scheme}")
        if self.diffusion_scheme not in DIFFUSION_SCHEMES:
            raise ValueError(f"Unknown diffusion_scheme: {self.diffusion_scheme}")
        if self.time_scheme not in TIME_SCHEMES:
            raise ValueError(f"Unknown time_scheme: {self.time_scheme}")
        if self.linearization not in LINEARIZATIONS:
            raise ValueError(f"Unknown linearization: {self.linearization}")

    def to_dict(self) -> Dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict) -> "TransportConfig":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class Field:
    """セル中心の場 values[成分, セル]"""
    values: np.ndarray
    time: float = 0.0
    nu: Optional[float] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2:
            raise ValueError(f"Field values must be 2-D (components, cells), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("Field contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_components(self) -> int:
        return self.values.shape[0]

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]

    def flat(self) -> np.ndarray:
        return self.values.ravel().copy()

    @classmethod
    def from_flat(cls, vector: np.ndarray, n_components: int, time: float = 0.0,
                  nu: Optional[float] = None) -> "Field":
        vector = np.asarray(vector, dtype=float)
        if vector.size % n_components:
            raise ValueError("Vector length is not a multiple of the component count")
        return cls(vector.reshape(n_components, -1), time=time, nu=nu)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """1 ステップ分の A U^{n+1} = b (成分ブロック順)"""
    A: csr_matrix
    b: np.ndarray
    n_components: int
    n_cells: int

    @property
    def size(self) -> int:
        return self.n_components * self.n_cells


@dataclass(frozen=True, eq=False)
class ResidualBundle:
    R: np.ndarray
    A: csr_matrix
    b: np.ndarray
    step: Optional[int] = None
    jac_current: Optional[csr_matrix] = None
    jac_previous: Optional[csr_matrix] = None


def _check_field(grid: Grid, f: Field, name: str, n_components: Optional[int] = None):
    if f.n_cells != grid.n_cells:
        raise ValueError(f"{name} has {f.n_cells} cells, grid has {grid.n_cells}")
    if n_components is not None and f.n_components != n_components:
        raise ValueError(f"{name} must have {n_components} components, got {f.n_components}")


def face_fluxes(grid: Grid, cfg: TransportConfig, u_lin: np.ndarray) -> np.ndarray:
    """面の質量流束 F = rho * (u_f . A_f) (n_cells, 4)。境界面では Dirichlet 値 0 なので F = 0"""
    nb = grid.neighbors
    interior = nb != BOUNDARY
    safe = np.where(interior, nb, 0)
    fluxes = np.zeros(nb.shape)
    for comp in range(2):
        u = u_lin[comp]
        u_face = 0.5 * (u[:, None] + u[safe])
        fluxes += np.where(interior, u_face, 0.0) * NORMALS[:, comp][None, :]
    return cfg.rho * fluxes * grid.face_area[None, :]


def diffusion_coefficients(grid: Grid, cfg: TransportConfig) -> np.ndarray:
    """D_f = rho * nu * |A_f| / d_f、境界面では d_f / 2"""
    boundary = grid.boundary_mask()
    distance = np.where(boundary, 0.5 * grid.face_distance[None, :], grid.face_distance[None, :])
    return cfg.rho * cfg.nu * grid.face_area[None, :] / distance


def split_fluxes(grid: Grid, cfg: TransportConfig, u_lin: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    風上側の速度で分割した対流流束 (流出 O, 流入 I)、いずれも (n_cells, 4)

    O は自セルの速度の外向き成分 (>= 0)、I は隣接セルの速度の外向き成分 (<= 0)。
    境界面は Dirichlet 値 0 なので両方 0。
    """
    nb = grid.neighbors
    interior = nb != BOUNDARY
    safe = np.where(interior, nb, 0)
    own = np.zeros(nb.shape)
    other = np.zeros(nb.shape)
    for comp in range(2):
        normal = NORMALS[:, comp][None, :]
        own += u_lin[comp][:, None] * normal
        other += u_lin[comp][safe] * normal
    weight = CONVECTIVE_FACTOR * cfg.rho * grid.face_area[None, :]
    outflow = np.where(interior, weight * np.maximum(own, 0.0), 0.0)
    inflow = np.where(interior, weight * np.minimum(other, 0.0), 0.0)
    return outflow, inflow


def _linear_upwind_fluxes(grid: Grid, outflow: np.ndarray, inflow: np.ndarray,
                          phi: np.ndarray) -> np.ndarray:
    """
    遅延補正の外向き流束 O (phi_P - phi_PP) / 2 + I (phi_N - phi_NN) / 2

    PP は P の反対側の隣接セル、NN は N の同じ方向の隣接セル。欠けていれば 0。
    """
    nb = grid.neighbors
    interior = nb != BOUNDARY
    safe_q = np.where(interior, nb, 0)
    far_own = nb[:, OPPOSITE]
    far_other = np.where(interior, nb[safe_q, np.arange(4)[None, :]], BOUNDARY)
    own_slope = np.where(far_own != BOUNDARY,
                         phi[:, None] - phi[np.where(far_own != BOUNDARY, far_own, 0)], 0.0)
    other_slope = np.where(far_other != BOUNDARY,
                           phi[safe_q] - phi[np.where(far_other != BOUNDARY, far_other, 0)], 0.0)
    return 0.5 * (outflow * own_slope + inflow * other_slope)


def _limit_correction(grid: Grid, phi: np.ndarray, low: np.ndarray, rowsum: np.ndarray,
                      contributions: np.ndarray) -> np.ndarray:
    """
    補正の寄与 (n_cells, 4) を面ごとに制限して合計する

    b_p が [局所最小, 局所最大] * (A の行和) を超えない範囲に収める。
    面の制限係数は両側のセルで共通なので補正は保存形のまま。
    """
    nb = grid.neighbors
    interior = nb != BOUNDARY
    safe = np.where(interior, nb, 0)
    boundary_value = 0.0
    around = np.where(interior, phi[safe], boundary_value)
    local_max = np.maximum(phi, around.max(axis=1))
    local_min = np.minimum(phi, around.min(axis=1))

    positive = rowsum > 0.0
    room_up = np.where(positive, np.maximum(local_max * rowsum - low, 0.0), 0.0)
    room_down = np.where(positive, np.maximum(low - local_min * rowsum, 0.0), 0.0)
    gain = np.maximum(contributions, 0.0).sum(axis=1)
    loss = np.maximum(-contributions, 0.0).sum(axis=1)
    ratio_up = np.where(gain > 0.0, np.minimum(1.0, room_up / np.where(gain > 0.0, gain, 1.0)), 1.0)
    ratio_down = np.where(loss > 0.0, np.minimum(1.0, room_down / np.where(loss > 0.0, loss, 1.0)), 1.0)

    limiter = np.where(contributions > 0.0,
                       np.minimum(ratio_up[:, None], ratio_down[safe]),
                       np.minimum(ratio_down[:, None], ratio_up[safe]))
    return np.where(interior, limiter * contributions, 0.0).sum(axis=1)


def assemble_step(grid: Grid, cfg: TransportConfig, u_prev: Field, u_lin: Field) -> LinearSystem:
    """
    陰的 Euler 1 ステップの線形システムを組み立てる

    Args:
        grid: 格子
        cfg: 物性値とスキーム
        u_prev: 前ステップの場 (輸送される量)
        u_lin: 凍結した対流速度 (2 成分)。通常は u_prev を渡す

    Returns:
        解が次ステップの場となる LinearSystem
    """
    _check_field(grid, u_prev, "u_prev")
    _check_field(grid, u_lin, "u_lin", n_components=2)

    n_cells = grid.n_cells
    n_comp = u_prev.n_components
    nb = grid.neighbors
    interior = nb != BOUNDARY
    safe = np.where(interior, nb, 0)
    scale = cfg.dt / grid.cell_volume

    outflow, inflow = split_fluxes(grid, cfg, u_lin.values)
    diff = diffusion_coefficients(grid, cfg)
    implicit_convection = cfg.linearization == "mixed"

    diag = cfg.rho + scale * diff.sum(axis=1) - cfg.dt * cfg.sp
    off = -scale * diff
    if implicit_convection:
        diag = diag + scale * outflow.sum(axis=1)
        off = off + scale * inflow

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    cells = np.arange(n_cells)
    row_faces, dir_faces = np.nonzero(interior)
    for comp in range(n_comp):
        offset = comp * n_cells
        rows.append(cells + offset)
        cols.append(cells + offset)
        vals.append(diag)
        rows.append(row_faces + offset)
        cols.append(nb[row_faces, dir_faces] + offset)
        vals.append(off[row_faces, dir_faces])
    size = n_comp * n_cells
    A = build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (size, size))
    rowsum = diag + np.where(interior, off, 0.0).sum(axis=1)

    b = np.empty((n_comp, n_cells))
    boundary_value = 0.0
    for comp in range(n_comp):
        phi = u_prev.values[comp]
        low = cfg.rho * phi + cfg.dt * cfg.su
        low = low + scale * np.where(interior, 0.0, diff * boundary_value).sum(axis=1)
        if not implicit_convection:
            low = low - scale * (outflow * phi[:, None] + inflow * phi[safe]).sum(axis=1)
        if cfg.convection_scheme == "linear_upwind":
            contributions = -scale * _linear_upwind_fluxes(grid, outflow, inflow, phi)
            b[comp] = low + _limit_correction(grid, phi, low, rowsum, contributions)
        else:
            b[comp] = low

    return LinearSystem(A=A, b=b.ravel(), n_components=n_comp, n_cells=n_cells)


def residual(sys: LinearSystem, phi: Union[Field, np.ndarray], step: Optional[int] = None) -> ResidualBundle:
    """R = A phi - b"""
    vector = phi.flat() if isinstance(phi, Field) else np.asarray(phi, dtype=float)
    if vector.shape != (sys.size,):
        raise ValueError(f"phi has {vector.size} entries, system has {sys.size}")
    R = sys.A @ vector - sys.b
    return ResidualBundle(R=R, A=sys.A, b=sys.b, step=step)


def conservation_budget(grid: Grid, cfg: TransportConfig, u_old: Field,
                        u_new: Field) -> Tuple[np.ndarray, np.ndarray]:
    """
    成分ごとの保存収支

    Returns:
        (sum_p V_p rho (u_new - u_old), dt * (境界拡散流束 + 生成項積分))
    """
    diff = diffusion_coefficients(grid, cfg)
    boundary = grid.boundary_mask()
    boundary_value = 0.0
    storage = grid.cell_volume * cfg.rho * (u_new.values - u_old.values).sum(axis=1)
    budget = np.empty(u_new.n_components)
    for comp in range(u_new.n_components):
        phi = u_new.values[comp]
        wall = np.where(boundary, diff * (boundary_value - phi[:, None]), 0.0).sum()
        source = grid.cell_volume * np.sum(cfg.su + cfg.sp * phi)
        budget[comp] = cfg.dt * (wall + source)
    return storage, budget


def cfl_number(grid: Grid, cfg: TransportConfig, u: Field) -> float:
    """最大 CFL 数 (報告のみ、制限はしない)"""
    return float(np.max(cfg.dt * (np.abs(u.values[0]) / grid.dx + np.abs(u.values[1]) / grid.dy)))


def initial_pulse(grid: Grid, lo: float = 0.25, hi: float = 0.5, value: float = 1.0,
                  n_components: int = 2) -> Field:
    """[lo, hi]^2 に値 value を持つ矩形パルス (全成分同じ値)"""
    centers = grid.cell_centers()
    inside = ((centers[:, 0] >= lo) & (centers[:, 0] <= hi) &
              (centers[:, 1] >= lo) & (centers[:, 1] <= hi))
    values = np.where(inside, value, 0.0)
    return Field(np.tile(values, (n_components, 1)), time=0.0)


def restrict_to_coarse(fine_grid: Grid, fine: Field) -> np.ndarray:
    """2x2 セル平均で粗い格子 (nx/2, ny/2) に制限"""
    if fine_grid.nx % 2 or fine_grid.ny % 2:
        raise ValueError("Fine grid dimensions must be even")
    out = []
    for comp in range(fine.n_components):
        v = fine.values[comp].reshape(fine_grid.ny, fine_grid.nx)
        coarse = 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])
        out.append(coarse.ravel())
    return np.array(out)


def march(grid: Grid, cfg: TransportConfig, u0: Field, n_steps: int,
          tol: float = DEFAULT_TOL) -> List[Field]:
    """
    陰的 Euler で n_steps ステップ時間発展

    対流速度は 1 ステップ遅れで線形化する (u_lin = 現在の場、Picard 反復なし)。

    Returns:
        各ステップ後の場のリスト (初期値は含まない)
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    _check_field(grid, u0, "u0", n_components=2)
    logger.info(f"Initial CFL number: {cfl_number(grid, cfg, u0):.3f}")

    snapshots: List[Field] = []
    current = u0
    for step in range(1, n_steps + 1):
        system = assemble_step(grid, cfg, current, current)
        try:
            solution = solve_sparse(system.A, system.b, tol=tol, x0=current.flat())
        except SolverConvergenceError as e:
            raise SolverConvergenceError(f"Linear solve failed at step {step}",
                                         e.iterations, e.residual_norm) from e
        current = Field.from_flat(solution, u0.n_components, time=u0.time + step * cfg.dt, nu=cfg.nu)
        snapshots.append(current)
    return snapshots


@dataclass(frozen=True)
class StepProblem:
    """R_{n+1}(U^n, U^{n+1}) = A(U^n) U^{n+1} - b(U^n) を評価する輸送問題 (u_lin = u_prev)"""
    grid: Grid
    cfg: TransportConfig
    n_components: int = 2

    @property
    def n_dof(self) -> int:
        return self.n_components * self.grid.n_cells

    @property
    def dependency_radius(self) -> int:
        """残差の行 p が U^n に依存するセルの範囲 (|di| + |dj|)"""
        # 制限付き補正: 隣接セルの制限係数が 2 セル先の値を読む
        return 3 if self.cfg.convection_scheme == "linear_upwind" else 1

    def build(self, u_prev: np.ndarray) -> LinearSystem:
        f = Field.from_flat(u_prev, self.n_components)
        return assemble_step(self.grid, self.cfg, f, f)

    def residual(self, u_prev: np.ndarray, u_cur: np.ndarray) -> np.ndarray:
        system = self.build(u_prev)
        return system.A @ np.asarray(u_cur, dtype=float) - system.b

    def residual_rows(self, U_prev: np.ndarray, U_cur: np.ndarray) -> np.ndarray:
        U_prev = np.atleast_2d(U_prev)
        U_cur = np.atleast_2d(U_cur)
        if U_prev.shape != U_cur.shape or U_prev.shape[1] != self.n_dof:
            raise ValueError(f"Residual rows need shape (k, {self.n_dof})")
        return np.stack([self.residual(p, c) for p, c in zip(U_prev, U_cur)])


@dataclass(frozen=True, eq=False)
class BlockJacobian:
    """
    ブロック二重対角ヤコビアン

    行ブロック k は R の k 番目の行 (pairs[k] = (前時刻列, 現時刻列))。
    diag_blocks[k] = dR_k / dU[cur]、sub_blocks[k] = dR_k / dU[prev]。
    """
    pairs: Tuple[Tuple[int, int], ...]
    diag_blocks: Tuple[csr_matrix, ...]
    sub_blocks: Tuple[csr_matrix, ...]
    n_instants: int
    n_dof: int

    @property
    def n_rows(self) -> int:
        return len(self.pairs)

    def transpose_dot(self, R_rows: np.ndarray, include_sub: bool = True) -> np.ndarray:
        """J^T R を時刻ごとの行 (n_instants, n_dof) で返す"""
        R_rows = np.atleast_2d(R_rows)
        if R_rows.shape != (self.n_rows, self.n_dof):
            raise ValueError(f"R rows must have shape ({self.n_rows}, {self.n_dof})")
        out = np.zeros((self.n_instants, self.n_dof))
        for k, (prev, cur) in enumerate(self.pairs):
            out[cur] += self.diag_blocks[k].T @ R_rows[k]
            if include_sub:
                out[prev] += self.sub_blocks[k].T @ R_rows[k]
        return out

    def block_pattern(self) -> np.ndarray:
        """非ゼロブロックの位置 (n_rows, n_instants)"""
        pattern = np.zeros((self.n_rows, self.n_instants), dtype=bool)
        for k, (prev, cur) in enumerate(self.pairs):
            pattern[k, cur] = self.diag_blocks[k].nnz > 0
            pattern[k, prev] = pattern[k, prev] or self.sub_blocks[k].nnz > 0
        return pattern

    def to_sparse(self) -> csr_matrix:
        from scipy.sparse import bmat
        blocks: List[List[Optional[csr_matrix]]] = [
            [None] * self.n_instants for _ in range(self.n_rows)
        ]
        for k, (prev, cur) in enumerate(self.pairs):
            blocks[k][cur] = self.diag_blocks[k]
            blocks[k][prev] = self.sub_blocks[k]
        for col in range(self.n_instants):
            if all(blocks[k][col] is None for k in range(self.n_rows)):
                blocks[0][col] = csr_matrix((self.n_dof, self.n_dof))
        return bmat(blocks, format="csr")


def _colored_fd_block(func: Callable[[np.ndarray], np.ndarray], x0: np.ndarray,
                      grid: Grid, n_components: int, fd_eps: float,
                      radius: int = 2) -> csr_matrix:
    """
    ひし形ステンシル (radius) 内でのみ依存する関数の中心差分ヤコビアン

    同じ色 (i mod 2r+1, j mod 2r+1, 成分) の列は影響範囲が重ならないので同時に摂動する。
    """
    n_cells = grid.n_cells
    period = 2 * radius + 1
    stencil = grid.stencil_cells(radius)
    i = np.tile(np.arange(grid.nx), grid.ny)
    j = np.repeat(np.arange(grid.ny), grid.nx)
    spatial_color = (i % period) * period + (j % period)
    size = n_components * n_cells

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for comp in range(n_components):
        for color in range(period * period):
            cells = np.nonzero(spatial_color == color)[0]
            if cells.size == 0:
                continue
            direction = np.zeros(size)
            direction[comp * n_cells + cells] = 1.0
            plus = func(x0 + fd_eps * direction)
            minus = func(x0 - fd_eps * direction)
            if not (np.all(np.isfinite(plus)) and np.all(np.isfinite(minus))):
                raise ValueError("Non-finite residual during finite-difference perturbation")
            derivative = (plus - minus) / (2.0 * fd_eps)
            for cell in cells:
                targets = stencil[cell]
                targets = targets[targets != BOUNDARY]
                for out_comp in range(n_components):
                    target_rows = out_comp * n_cells + targets
                    rows.append(target_rows)
                    cols.append(np.full(target_rows.size, comp * n_cells + cell))
                    vals.append(derivative[target_rows])
    block = build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (size, size))
    block.eliminate_zeros()
    return block


def jacobian(sys_builder: StepProblem, u_all: Sequence[Union[Field, np.ndarray]],
             mode: str = "analytic", fd_eps: float = 1e-6,
             pairs: Optional[Sequence[Tuple[int, int]]] = None,
             include_previous: bool = True) -> BlockJacobian:
    """
    残差列 R のヤコビアン

    Args:
        sys_builder: 前時刻の場から線形システムを作る StepProblem
        u_all: 各時刻の予測場
        mode: "analytic" (対角ブロック = A、副対角は差分) または "finite_difference"
        fd_eps: 差分幅
        pairs: (前時刻, 現時刻) の組。省略時は連続する時刻の組
        include_previous: False なら前時刻ブロックを計算せず空にする

    Returns:
        BlockJacobian
    """
    if mode not in ("analytic", "finite_difference"):
        raise ValueError(f"Unknown Jacobian mode: {mode}")
    if not fd_eps > 0:
        raise ValueError(f"fd_eps must be positive, got {fd_eps}")
    U = np.stack([u.flat() if isinstance(u, Field) else np.asarray(u, dtype=float) for u in u_all])
    if U.shape[1] != sys_builder.n_dof:
        raise ValueError(f"Fields have {U.shape[1]} unknowns, problem has {sys_builder.n_dof}")
    if pairs is None:
        pairs = [(k - 1, k) for k in range(1, U.shape[0])]
    pairs = tuple((int(p), int(c)) for p, c in pairs)

    grid = sys_builder.grid
    n_comp = sys_builder.n_components
    diag_blocks = []
    sub_blocks = []
    for prev, cur in pairs:
        u_prev = U[prev]
        u_cur = U[cur]
        if mode == "analytic":
            diag = sys_builder.build(u_prev).A
        else:
            diag = _colored_fd_block(lambda x: sys_builder.residual(u_prev, x), u_cur,
                                     grid, n_comp, fd_eps, radius=1)
        if include_previous:
            sub = _colored_fd_block(lambda x: sys_builder.residual(x, u_cur), u_prev,
                                    grid, n_comp, fd_eps, radius=sys_builder.dependency_radius)
        else:
            sub = csr_matrix((sys_builder.n_dof, sys_builder.n_dof))
        diag_blocks.append(diag)
        sub_blocks.append(sub)
    return BlockJacobian(pairs=pairs, diag_blocks=tuple(diag_blocks), sub_blocks=tuple(sub_blocks),
                         n_instants=U.shape[0], n_dof=U.shape[1])
