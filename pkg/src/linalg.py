#!/usr/bin/env python3
"""
共通の線形代数カーネル

- 疎行列 (CSR) の構築と行列ベクトル積
- Jacobi 前処理付き再始動 BiCGStab (対流項のため A は非対称)
- POD 用の対称固有値ソルバー (巡回 Jacobi 回転)

DenseMatrix は numpy の 2 次元配列、Tensor3 は 3 次元配列として扱う。
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, issparse

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


class SolverConvergenceError(RuntimeError):
    """反復ソルバーが収束しなかった場合のエラー"""

    def __init__(self, message: str, iterations: int, residual_norm: float):
        super().__init__(f"{message} (iterations={iterations}, residual={residual_norm:.3e})")
        self.iterations = iterations
        self.residual_norm = residual_norm


def build_csr(rows, cols, values, shape: Tuple[int, int]) -> csr_matrix:
    """COO 形式の三つ組から CSR 行列を作成 (重複は加算、列インデックスは昇順)"""
    matrix = coo_matrix(
        (np.asarray(values, dtype=float), (np.asarray(rows), np.asarray(cols))),
        shape=shape,
    ).tocsr()
    matrix.sum_duplicates()
    matrix.sort_indices()
    return matrix


def as_csr(A) -> csr_matrix:
    if issparse(A) and isinstance(A, csr_matrix):
        return A
    return csr_matrix(A)


def solve_sparse(A, b: np.ndarray, tol: float = DEFAULT_TOL,
                 max_iter: Optional[int] = None,
                 x0: Optional[np.ndarray] = None) -> np.ndarray:
    """
    A x = b を Jacobi 前処理付き BiCGStab で解く

    Args:
        A: 正方疎行列
        b: 右辺ベクトル
        tol: 絶対許容誤差 (真の残差の最大値ノルム)
        max_iter: 最大反復回数 (省略時 10 * N)
        x0: 初期値

    Returns:
        ||A x - b||_inf <= tol を満たす解

    Raises:
        SolverConvergenceError: 収束しない場合
    """
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    if b.shape != (n,):
        raise ValueError(f"b has shape {b.shape}, expected ({n},)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = 10 * n

    diag = A.diagonal()
    inv_diag = np.where(diag != 0.0, 1.0 / np.where(diag != 0.0, diag, 1.0), 1.0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    res_norm = np.max(np.abs(r)) if n else 0.0
    if res_norm <= tol:
        return x

    r_hat = r.copy()
    rho_old = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    iterations = 0

    while iterations < max_iter:
        iterations += 1
        rho = np.dot(r_hat, r)
        if abs(rho) < 1e-300:
            # 崩壊したので現在の残差で再始動
            r_hat = r.copy()
            rho = np.dot(r_hat, r)
            p = np.zeros(n)
            v = np.zeros(n)
            rho_old = alpha = omega = 1.0
            if abs(rho) < 1e-300:
                break
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = inv_diag * p
        v = A @ p_hat
        denom = np.dot(r_hat, v)
        if abs(denom) < 1e-300:
            r_hat = r.copy()
            rho_old = alpha = omega = 1.0
            p = np.zeros(n)
            v = np.zeros(n)
            continue
        alpha = rho / denom
        s = r - alpha * v
        if np.max(np.abs(s)) <= tol:
            x = x + alpha * p_hat
            r = b - A @ x
            res_norm = np.max(np.abs(r))
            if res_norm <= tol:
                return x
            r_hat = r.copy()
            rho_old = alpha = omega = 1.0
            p = np.zeros(n)
            v = np.zeros(n)
            continue
        s_hat = inv_diag * s
        t = A @ s_hat
        tt = np.dot(t, t)
        if tt < 1e-300:
            x = x + alpha * p_hat
            r = b - A @ x
            r_hat = r.copy()
            rho_old = alpha = omega = 1.0
            p = np.zeros(n)
            v = np.zeros(n)
            continue
        omega = np.dot(t, s) / tt
        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t
        rho_old = rho

        if np.max(np.abs(r)) <= tol:
            # 漸化式の残差はずれるので真の残差で判定
            r = b - A @ x
            res_norm = np.max(np.abs(r))
            if res_norm <= tol:
                return x
            r_hat = r.copy()
            rho_old = alpha = omega = 1.0
            p = np.zeros(n)
            v = np.zeros(n)

    r = b - A @ x
    res_norm = float(np.max(np.abs(r))) if n else 0.0
    if res_norm <= tol:
        return x
    raise SolverConvergenceError("BiCGStab did not converge", iterations, res_norm)


def sym_eig(C: np.ndarray, method: str = "jacobi",
            sym_tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """
    対称行列の固有値分解

    Args:
        C: 対称 (半正定値を想定) 行列
        method: "jacobi" (巡回 Jacobi 回転) または "lapack" (numpy.linalg.eigh)
        sym_tol: 非対称性の許容値

    Returns:
        (降順の固有値, 列が正規直交固有ベクトルの行列)
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"C must be square, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("C contains non-finite values")
    scale = max(1.0, float(np.max(np.abs(C)))) if C.size else 1.0
    asym = float(np.max(np.abs(C - C.T))) if C.size else 0.0
    if asym > sym_tol * scale:
        raise ValueError(f"C is not symmetric (max asymmetry {asym:.3e})")

    C = 0.5 * (C + C.T)
    if method == "jacobi":
        eigenvalues, eigenvectors = _jacobi_eigen(C)
    elif method == "lapack":
        eigenvalues, eigenvectors = np.linalg.eigh(C)
    else:
        raise ValueError(f"Unknown eigensolver method: {method}")

    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]

    if np.any(eigenvalues < 0.0):
        most_negative = float(eigenvalues.min())
        logger.warning(f"Clamping negative eigenvalues to 0 (min {most_negative:.3e})")
        eigenvalues = np.maximum(eigenvalues, 0.0)

    return eigenvalues, eigenvectors


def _jacobi_eigen(C: np.ndarray, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """巡回 Jacobi 法: 非対角 Frobenius ノルムが 1e-12 * ||C|| を下回るまで掃引"""
    a = C.copy()
    n = a.shape[0]
    v = np.eye(n)
    norm_c = np.linalg.norm(C)
    if n <= 1 or norm_c == 0.0:
        return np.diag(a).copy(), v
    threshold = 1e-12 * norm_c

    for sweep in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning(f"Jacobi eigensolver stopped after {max_sweeps} sweeps")

    return np.diag(a).copy(), v
