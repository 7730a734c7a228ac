#!/usr/bin/env python3
"""
POD 基底と Galerkin 射影による低次元モデル

スナップショット行列 Z (列 = 成分ブロック順の速度場) から、体積重み付き
L2 内積の相関行列 C = Z^T W Z の固有分解で基底を作り、有限体積演算子を
射影して M_r, D_r, C_r (3 階テンソル), B_r, P_r を得る。

縮約系: M_r ȧ = ν D_r a - C_r(a) a - B_r b
  X(a, b) = M_r^{-1} (ν D_r a - C_r(a) a - B_r b)
  (C_r(a) a)_i = Σ_jk C_r[i, j, k] a_j a_k   (j: 輸送される場、k: 輸送する速度)
  R_red1 = ȧ - X(a, b),  R_red2 = P_r a
"""
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse import csr_matrix

from fv_core import (BOUNDARY, CONVECTIVE_FACTOR, Field, Grid, TransportConfig,
                     diffusion_coefficients, face_fluxes, march)
from linalg import build_csr, sym_eig

logger = logging.getLogger(__name__)

EIGEN_CUTOFF = 1e-14


class RomIntegrationError(RuntimeError):
    """縮約系の固定点反復が収束しなかった"""

    def __init__(self, message: str, step: int, iterations: int):
        super().__init__(f"{message} (step={step}, iterations={iterations})")
        self.step = step
        self.iterations = iterations


def grid_hash(grid: Grid) -> str:
    payload = json.dumps({"nx": grid.nx, "ny": grid.ny, "lx": grid.lx, "ly": grid.ly}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class SnapshotSet:
    """スナップショット行列と列ごとの時刻・パラメータ"""
    Z: np.ndarray
    times: np.ndarray
    nus: np.ndarray
    grid: Grid
    n_components: int = 2

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] < 1:
            raise ValueError("Snapshot matrix must have at least one column")
        if Z.shape[0] != self.n_components * self.grid.n_cells:
            raise ValueError(f"Snapshot rows {Z.shape[0]} do not match grid "
                             f"({self.n_components} x {self.grid.n_cells})")
        times = np.asarray(self.times, dtype=float).reshape(-1)
        nus = np.asarray(self.nus, dtype=float).reshape(-1)
        if times.size != Z.shape[1] or nus.size != Z.shape[1]:
            raise ValueError("Column metadata must have one entry per snapshot")
        if not np.all(np.isfinite(Z)):
            raise ValueError("Snapshot matrix contains non-finite values")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "nus", nus)

    @property
    def n_snapshots(self) -> int:
        return self.Z.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.Z.shape[0], self.grid.cell_volume)

    @classmethod
    def from_fields(cls, grid: Grid, fields: Sequence[Field]) -> "SnapshotSet":
        if not fields:
            raise ValueError("At least one field is required")
        Z = np.stack([f.flat() for f in fields], axis=1)
        nus = [np.nan if f.nu is None else f.nu for f in fields]
        return cls(Z=Z, times=[f.time for f in fields], nus=nus, grid=grid,
                   n_components=fields[0].n_components)

    @classmethod
    def concatenate(cls, sets: Sequence["SnapshotSet"]) -> "SnapshotSet":
        first = sets[0]
        return cls(Z=np.concatenate([s.Z for s in sets], axis=1),
                   times=np.concatenate([s.times for s in sets]),
                   nus=np.concatenate([s.nus for s in sets]),
                   grid=first.grid, n_components=first.n_components)


@dataclass(frozen=True, eq=False)
class PodBasis:
    """重み付き正規直交な POD 基底 (列がモード)"""
    modes: np.ndarray
    eigenvalues: np.ndarray
    weights: np.ndarray

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    def project(self, u: np.ndarray) -> np.ndarray:
        """係数 a = Φ^T W u (u は列ベクトルの並びでもよい)"""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return self.modes.T @ (self.weights * u)
        return self.modes.T @ (self.weights[:, None] * u)

    def reconstruct(self, a: np.ndarray) -> np.ndarray:
        return self.modes @ np.asarray(a, dtype=float)

    def energy_fraction(self) -> np.ndarray:
        """先頭 n モードの累積エネルギー比 (n = 1..全固有値数)"""
        total = self.eigenvalues.sum()
        if total <= 0.0:
            return np.zeros_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total

    def truncation_error(self, n_modes: Optional[int] = None) -> float:
        n = self.n_modes if n_modes is None else n_modes
        total = self.eigenvalues.sum()
        return float(self.eigenvalues[n:].sum() / total) if total > 0 else 0.0

    def to_document(self, grid: Grid) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
        header = {
            "kind": "pod_basis",
            "grid_hash": grid_hash(grid),
            "grid": grid.to_dict(),
            "n_modes": self.n_modes,
            "eigenvalues": self.eigenvalues.tolist(),
        }
        return header, [("modes", self.modes), ("weights", self.weights)]

    @classmethod
    def from_document(cls, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> "PodBasis":
        if header.get("kind") != "pod_basis":
            raise ValueError(f"Not a POD basis document: kind={header.get('kind')}")
        return cls(modes=arrays["modes"], eigenvalues=np.array(header["eigenvalues"], dtype=float),
                   weights=arrays["weights"])


def pod(snapshots: SnapshotSet, n_modes: int, method: str = "jacobi") -> PodBasis:
    """
    スナップショットの POD

    Args:
        snapshots: SnapshotSet
        n_modes: 保持するモード数 (N_s 以下)
        method: 固有値ソルバー ("jacobi" または "lapack")

    Returns:
        PodBasis (固有値が 1e-14 * λ1 未満のモードは警告付きで切り捨て)
    """
    n_s = snapshots.n_snapshots
    if n_modes < 1 or n_modes > n_s:
        raise ValueError(f"n_modes must be between 1 and {n_s}, got {n_modes}")

    Z = snapshots.Z
    w = snapshots.weights
    correlation = Z.T @ (w[:, None] * Z)
    eigenvalues, eigenvectors = sym_eig(correlation, method=method)
    if eigenvalues[0] <= 0.0:
        raise ValueError("Snapshot set has zero energy")

    usable = int(np.sum(eigenvalues[:n_modes] > EIGEN_CUTOFF * eigenvalues[0]))
    if usable < n_modes:
        logger.warning(f"Truncating POD basis to {usable} modes "
                       f"(requested {n_modes}, eigenvalues below {EIGEN_CUTOFF:.0e} * lambda_1)")
    lam = eigenvalues[:usable]
    modes = Z @ eigenvectors[:, :usable] / np.sqrt(lam)
    norms = np.sqrt(np.sum(w[:, None] * modes * modes, axis=0))
    modes = modes / norms
    return PodBasis(modes=modes, eigenvalues=eigenvalues, weights=w)


def diffusion_operator(grid: Grid, n_components: int = 2) -> csr_matrix:
    """単位拡散係数の面流束和 (L φ)_p = Σ_f |A_f| / d_f (φ_nb - φ_p)、境界値 0"""
    coeff = diffusion_coefficients(grid, TransportConfig(rho=1.0, nu=1.0))
    nb = grid.neighbors
    n_cells = grid.n_cells
    rows, cols, vals = [], [], []
    cells = np.arange(n_cells)
    faces, dirs = np.nonzero(nb != BOUNDARY)
    for comp in range(n_components):
        off = comp * n_cells
        rows += [cells + off, faces + off]
        cols += [cells + off, nb[faces, dirs] + off]
        vals += [-coeff.sum(axis=1), coeff[faces, dirs]]
    size = n_components * n_cells
    return build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (size, size))


def convection_operator(grid: Grid, velocity: np.ndarray, n_components: int = 2) -> csr_matrix:
    """
    速度 velocity (2, n_cells) による中心補間の対流流束和
    (K φ)_p = c Σ_f F_f (φ_p + φ_nb) / 2  (c = CONVECTIVE_FACTOR)
    """
    fluxes = face_fluxes(grid, TransportConfig(rho=1.0, nu=0.0), velocity)
    nb = grid.neighbors
    n_cells = grid.n_cells
    interior = nb != BOUNDARY
    half = 0.5 * CONVECTIVE_FACTOR * np.where(interior, fluxes, 0.0)
    rows, cols, vals = [], [], []
    cells = np.arange(n_cells)
    faces, dirs = np.nonzero(interior)
    for comp in range(n_components):
        off = comp * n_cells
        rows += [cells + off, faces + off]
        cols += [cells + off, nb[faces, dirs] + off]
        vals += [half.sum(axis=1), half[faces, dirs]]
    size = n_components * n_cells
    return build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (size, size))


def gradient_operator(grid: Grid) -> csr_matrix:
    """圧力勾配の面積分 Σ_f p_f n_f |A_f| (n_dof x n_cells)、境界はゼロ勾配 (p_f = p_P)"""
    nb = grid.neighbors
    n_cells = grid.n_cells
    areas = grid.outward_area_vectors()
    rows, cols, vals = [], [], []
    for comp in range(2):
        for d in range(4):
            a = areas[d, comp]
            if a == 0.0:
                continue
            cells = np.arange(n_cells)
            interior = nb[:, d] != BOUNDARY
            own_weight = np.where(interior, 0.5, 1.0) * a
            rows += [comp * n_cells + cells, comp * n_cells + cells[interior]]
            cols += [cells, nb[interior, d]]
            vals += [own_weight, np.full(interior.sum(), 0.5 * a)]
    return build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                     (2 * n_cells, n_cells))


def divergence_operator(grid: Grid) -> csr_matrix:
    """速度の発散 Σ_f u_f · A_f (n_cells x n_dof)、境界面の速度は 0"""
    nb = grid.neighbors
    n_cells = grid.n_cells
    areas = grid.outward_area_vectors()
    rows, cols, vals = [], [], []
    for comp in range(2):
        for d in range(4):
            a = areas[d, comp]
            if a == 0.0:
                continue
            cells = np.arange(n_cells)
            interior = nb[:, d] != BOUNDARY
            rows += [cells[interior], cells[interior]]
            cols += [comp * n_cells + cells[interior], comp * n_cells + nb[interior, d]]
            vals += [np.full(interior.sum(), 0.5 * a)] * 2
    return build_csr(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals),
                     (n_cells, 2 * n_cells))


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """射影済みの縮約演算子"""
    M: np.ndarray
    D: np.ndarray
    C: np.ndarray
    nu: float
    B: Optional[np.ndarray] = None
    P: Optional[np.ndarray] = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.M, dtype=float))
        n = M.shape[0]
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        C = np.asarray(self.C, dtype=float).reshape(n, n, n)
        if M.shape != (n, n) or D.shape != (n, n):
            raise ValueError("M and D must be square with matching size")
        if not np.allclose(M, M.T, atol=1e-10 * max(1.0, np.abs(M).max())):
            raise ValueError("M_r is not symmetric")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError as e:
            raise ValueError("M_r is singular or not positive definite") from e
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "C", C)
        if self.B is not None:
            B = np.atleast_2d(np.asarray(self.B, dtype=float))
            if B.shape[0] != n:
                raise ValueError(f"B_r must have {n} rows")
            object.__setattr__(self, "B", B)
        if self.P is not None:
            P = np.atleast_2d(np.asarray(self.P, dtype=float))
            if P.shape[1] != n:
                raise ValueError(f"P_r must have {n} columns")
            object.__setattr__(self, "P", P)
        object.__setattr__(self, "_lu", lu_factor(M))

    @property
    def n_u(self) -> int:
        return self.M.shape[0]

    @property
    def n_p(self) -> int:
        return 0 if self.B is None else self.B.shape[1]

    def with_nu(self, nu: float) -> "ReducedSystem":
        if not nu >= 0:
            raise ValueError(f"nu must be non-negative, got {nu}")
        return replace(self, nu=float(nu))

    def solve_mass(self, rhs: np.ndarray) -> np.ndarray:
        return lu_solve(self._lu, rhs, check_finite=False)

    def to_document(self) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
        header = {"kind": "reduced_system", "nu": self.nu, "n_u": self.n_u, "n_p": self.n_p}
        arrays = [("M", self.M), ("D", self.D), ("C", self.C)]
        if self.B is not None:
            arrays.append(("B", self.B))
        if self.P is not None:
            arrays.append(("P", self.P))
        return header, arrays

    @classmethod
    def from_document(cls, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> "ReducedSystem":
        if header.get("kind") != "reduced_system":
            raise ValueError(f"Not a reduced system document: kind={header.get('kind')}")
        return cls(M=arrays["M"], D=arrays["D"], C=arrays["C"], nu=float(header["nu"]),
                   B=arrays.get("B"), P=arrays.get("P"))


@dataclass(frozen=True)
class ReducedState:
    a: np.ndarray
    b_p: Optional[np.ndarray] = None
    time: float = 0.0
    nu: Optional[float] = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        b_p = np.zeros(0) if self.b_p is None else np.asarray(self.b_p, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b_p))):
            raise ValueError("Reduced state contains non-finite values")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b_p", b_p)


def project_operators(grid: Grid, cfg: TransportConfig, basis_u: PodBasis,
                      basis_p: Optional[PodBasis] = None) -> ReducedSystem:
    """
    有限体積演算子を POD 基底に射影

    Args:
        grid: 格子
        cfg: 物性値 (nu を縮約系の初期パラメータとして使う)
        basis_u: 速度基底 (2 成分)
        basis_p: 圧力基底 (1 成分、省略可)
    """
    phi = basis_u.modes
    if phi.shape[0] != 2 * grid.n_cells:
        raise ValueError("Velocity basis does not match the grid")
    n = phi.shape[1]

    M = phi.T @ (basis_u.weights[:, None] * phi)
    M = 0.5 * (M + M.T)
    D = phi.T @ (diffusion_operator(grid) @ phi)

    C = np.empty((n, n, n))
    for k in range(n):
        velocity = phi[:, k].reshape(2, grid.n_cells)
        K = convection_operator(grid, velocity)
        C[:, :, k] = phi.T @ (K @ phi)

    B = P = None
    if basis_p is not None:
        psi = basis_p.modes
        if psi.shape[0] != grid.n_cells:
            raise ValueError("Pressure basis does not match the grid")
        B = phi.T @ (gradient_operator(grid) @ psi)
        P = psi.T @ (divergence_operator(grid) @ phi)
    return ReducedSystem(M=M, D=D, C=C, nu=cfg.nu, B=B, P=P)


def require_pressure(sys: ReducedSystem):
    if sys.B is None or sys.P is None:
        raise ValueError("Reduced system has no pressure basis (B_r/P_r missing)")


def _pressure_term(sys: ReducedSystem, b_p: np.ndarray) -> np.ndarray:
    if sys.B is None or b_p.size == 0:
        return 0.0
    if b_p.shape[-1] != sys.n_p:
        raise ValueError(f"Pressure coefficients have {b_p.shape[-1]} entries, expected {sys.n_p}")
    return b_p @ sys.B.T


def reduced_rhs(sys: ReducedSystem, state: ReducedState) -> np.ndarray:
    """X(a, b) = M_r^{-1} (ν D_r a - C_r(a) a - B_r b)"""
    a = state.a
    if a.size != sys.n_u:
        raise ValueError(f"State has {a.size} coefficients, system has {sys.n_u}")
    rhs = sys.nu * (sys.D @ a) - np.einsum("ijk,j,k->i", sys.C, a, a) - _pressure_term(sys, state.b_p)
    return sys.solve_mass(rhs)


def reduced_rhs_rows(sys: ReducedSystem, a_rows: np.ndarray,
                     b_rows: Optional[np.ndarray] = None) -> np.ndarray:
    """行ごとの X (n_rows, n_u)"""
    a_rows = np.atleast_2d(a_rows)
    if a_rows.shape[1] != sys.n_u:
        raise ValueError(f"Rows have {a_rows.shape[1]} coefficients, system has {sys.n_u}")
    rhs = sys.nu * a_rows @ sys.D.T - np.einsum("ijk,nj,nk->ni", sys.C, a_rows, a_rows)
    if b_rows is not None:
        rhs = rhs - _pressure_term(sys, np.atleast_2d(b_rows))
    return sys.solve_mass(rhs.T).T


def reduced_jacobian(sys: ReducedSystem, state: ReducedState, mode: str = "finite_difference",
                     fd_eps: float = 1e-6) -> np.ndarray:
    """
    ∂X/∂Q (n_u x (n_u + n_p))、Q = [a | b_p]

    mode: "analytic" または "finite_difference" (中心差分)
    """
    if not fd_eps > 0:
        raise ValueError(f"fd_eps must be positive, got {fd_eps}")
    a = state.a
    b_p = state.b_p if state.b_p.size else np.zeros(sys.n_p)
    if mode == "analytic":
        conv = np.einsum("imk,k->im", sys.C, a) + np.einsum("ijm,j->im", sys.C, a)
        jac_a = sys.solve_mass(sys.nu * sys.D - conv)
        if sys.n_p == 0:
            return jac_a
        return np.hstack([jac_a, -sys.solve_mass(sys.B)])
    if mode != "finite_difference":
        raise ValueError(f"Unknown Jacobian mode: {mode}")

    q = np.concatenate([a, b_p])
    jac = np.empty((sys.n_u, q.size))
    for m in range(q.size):
        step = np.zeros(q.size)
        step[m] = fd_eps
        plus = reduced_rhs(sys, ReducedState(a=(q + step)[:sys.n_u], b_p=(q + step)[sys.n_u:]))
        minus = reduced_rhs(sys, ReducedState(a=(q - step)[:sys.n_u], b_p=(q - step)[sys.n_u:]))
        jac[:, m] = (plus - minus) / (2.0 * fd_eps)
    return jac


def reduced_residuals(sys: ReducedSystem, state: ReducedState,
                      a_dot: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(R_red1, R_red2) = (ȧ - X(a, b), P_r a)。P_r が無ければ R_red2 は空"""
    a_dot = np.asarray(a_dot, dtype=float).reshape(-1)
    if a_dot.size != sys.n_u:
        raise ValueError(f"a_dot has {a_dot.size} entries, system has {sys.n_u}")
    r1 = a_dot - reduced_rhs(sys, state)
    r2 = sys.P @ state.a if sys.P is not None else np.zeros(0)
    return r1, r2


def rom_march(sys: ReducedSystem, a0: ReducedState, dt: float, n_steps: int,
              tol: float = 1e-10, max_iter: int = 50) -> np.ndarray:
    """
    暗黙中点則で ȧ = X(a) を積分 (固定点反復)

    Returns:
        係数の軌道 (n_steps + 1, n_u)、先頭は初期値
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    b_p = a0.b_p
    trajectory = np.empty((n_steps + 1, sys.n_u))
    trajectory[0] = a0.a
    a = a0.a
    for step in range(1, n_steps + 1):
        x_old = reduced_rhs(sys, ReducedState(a=a, b_p=b_p))
        guess = a + dt * x_old
        for iteration in range(1, max_iter + 1):
            mid = 0.5 * (a + guess)
            new = a + dt * reduced_rhs(sys, ReducedState(a=mid, b_p=b_p))
            if not np.all(np.isfinite(new)):
                raise RomIntegrationError("Reduced integration produced non-finite values", step, iteration)
            delta = np.max(np.abs(new - guess))
            guess = new
            if delta <= tol:
                break
        else:
            raise RomIntegrationError("Fixed-point iteration did not converge", step, max_iter)
        a = guess
        trajectory[step] = a
    return trajectory


def collect_snapshots(grid: Grid, cfg: TransportConfig, u0: Field, nus: Sequence[float],
                      n_steps: int, every: int = 10) -> SnapshotSet:
    """ν ごとに march を実行し、every ステップごとの場 (初期値を含む) を集める"""
    if every < 1:
        raise ValueError("every must be >= 1")
    sets = []
    for nu in nus:
        run_cfg = replace(cfg, nu=float(nu))
        fields = [Field(u0.values, time=u0.time, nu=float(nu))]
        fields += march(grid, run_cfg, u0, n_steps)
        kept = [f for k, f in enumerate(fields) if k % every == 0]
        logger.info(f"Collected {len(kept)} snapshots for nu={nu}")
        sets.append(SnapshotSet.from_fields(grid, kept))
    return SnapshotSet.concatenate(sets)
