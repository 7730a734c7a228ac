#!/usr/bin/env python3
"""
外部の全次元ソルバーと結合した DisPINN 学習

時刻 t から全セルの速度場を出力するネットワークを、データ損失と
ソルバー残差 R = A U - b による物理損失で学習する。R とヤコビアンは
ソルバーから取り込んだ値 (計算グラフから切り離された定数) として扱い、
補正項 [2 R J]_detached · U_pred の勾配で逆伝播する。
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from nn_autodiff import AdamState, MlpParams, adam_step, backward_params, forward

logger = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """学習ループの中断 (ソルバー障害または非有限な損失)"""

    def __init__(self, message: str, epoch: int, request_id: Optional[int] = None):
        detail = f"epoch {epoch}"
        if request_id is not None:
            detail += f", request {request_id}"
        super().__init__(f"{message} ({detail})")
        self.epoch = epoch
        self.request_id = request_id


@dataclass
class FomTrainConfig:
    lambda_dis: float = 1.0
    lambda_data: float = 1.0
    k_int: int = 20
    epochs: int = 3999
    lr: float = 0.006
    data_indices: List[int] = field(default_factory=lambda: [0])
    physics_indices: List[int] = field(default_factory=lambda: list(range(10, 201, 10)))
    correction: bool = True
    jacobian_mode: str = "analytic"
    fd_eps: float = 1e-6
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.k_int < 1:
            raise ValueError(f"k_int must be >= 1, got {self.k_int}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lambda_dis < 0 or self.lambda_data < 0:
            raise ValueError("Loss weights must be non-negative")
        if any(k < 1 for k in self.physics_indices):
            raise ValueError("physics_indices must be >= 1 (a residual needs the previous step)")
        if any(k < 0 for k in self.data_indices):
            raise ValueError("data_indices must be >= 0")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"Unknown jacobian_mode: {self.jacobian_mode}")


@dataclass
class LossReport:
    epoch: int
    loss_data: float
    loss_eqn: float
    loss_dis: float
    loss_total: float
    wall_time: float
    loss_eqn_pressure: float = 0.0
    loss_dis_pressure: float = 0.0

    def to_row(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SurrogateLoss:
    """切り離された係数による代理損失の値と、予測値に対する余接"""
    value: float
    cotangent: np.ndarray


def loss_data(U_pred: np.ndarray, U_actual: np.ndarray, data_indices: Sequence[int]) -> float:
    """データ行の平均二乗誤差 (全セル・全成分の平均)"""
    rows = np.asarray(data_indices, dtype=int)
    if rows.size == 0:
        logger.warning("loss_data called with an empty index set")
        return 0.0
    U_pred = np.atleast_2d(U_pred)
    U_actual = np.atleast_2d(U_actual)
    if rows.max() >= U_pred.shape[0] or rows.max() >= U_actual.shape[0] or rows.min() < 0:
        raise ValueError("data_indices out of range")
    diff = U_pred[rows] - U_actual[rows]
    return float(np.mean(diff * diff))


def loss_data_cotangent(U_pred: np.ndarray, U_actual: np.ndarray,
                        data_indices: Sequence[int]) -> np.ndarray:
    rows = np.asarray(data_indices, dtype=int)
    cot = np.zeros_like(U_pred)
    if rows.size == 0:
        return cot
    diff = U_pred[rows] - U_actual[rows]
    np.add.at(cot, rows, 2.0 * diff / diff.size)
    return cot


def loss_eqn(residual_rows: np.ndarray) -> float:
    """残差の二乗平均 (行数 × 要素数で割る)"""
    R = np.atleast_2d(np.asarray(residual_rows, dtype=float))
    if R.size == 0:
        return 0.0
    return float(np.mean(R * R))


def loss_dis(residual_rows: np.ndarray, jac, U_pred: np.ndarray,
             include_previous: bool = True) -> SurrogateLoss:
    """
    補正付き物理損失 [2 R J]_detached · U_pred / N

    Args:
        residual_rows: 物理行の残差 (n_rows, n_dof)
        jac: BlockJacobian (pairs は U_pred の行番号)
        U_pred: ネットワークの予測 (n_instants, n_dof)
        include_previous: False なら前時刻ブロックを無視 (A と b を定数とみなす)

    Returns:
        SurrogateLoss (cotangent は U_pred と同じ形)
    """
    R = np.atleast_2d(np.asarray(residual_rows, dtype=float))
    if jac is None:
        raise ValueError("Jacobian is required for the corrected loss")
    n_entries = R.size
    if n_entries == 0:
        return SurrogateLoss(0.0, np.zeros_like(U_pred))
    cot = (2.0 / n_entries) * jac.transpose_dot(R, include_sub=include_previous)
    return SurrogateLoss(float(np.sum(cot * U_pred)), cot)


def relative_l2_errors(pred: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """時刻ごとの相対 L2 誤差 ||ref - pred|| / ||ref||"""
    pred = np.atleast_2d(pred)
    ref = np.atleast_2d(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"Shape mismatch: {pred.shape} vs {ref.shape}")
    num = np.linalg.norm(ref - pred, axis=1)
    den = np.linalg.norm(ref, axis=1)
    return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), num)


def max_abs_errors(pred: np.ndarray, ref: np.ndarray) -> np.ndarray:
    pred = np.atleast_2d(pred)
    ref = np.atleast_2d(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"Shape mismatch: {pred.shape} vs {ref.shape}")
    return np.max(np.abs(ref - pred), axis=1)


def predict_fields(params: MlpParams, times: Sequence[float]) -> np.ndarray:
    out, _ = forward(params, np.asarray(times, dtype=float).reshape(-1, 1))
    return out


class FomTrainer:
    """全次元ソルバーと結合した学習ループ"""

    def __init__(self, cfg: FomTrainConfig, solver, dt: float, debug: bool = False):
        """
        Args:
            cfg: 学習設定
            solver: InProcessSolver または DaemonClient
            dt: ソルバーの時間刻み (ステップ番号から時刻への換算)
            debug: デバッグログ
        """
        self.cfg = cfg
        self.solver = solver
        self.dt = dt
        self.debug = debug
        self.logger = self._setup_logger()

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(__name__)
        logger.setLevel(logging.DEBUG if self.debug else logging.INFO)

        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
            handler.setFormatter(formatter)
            logger.addHandler(handler)

        return logger

    def evaluation_steps(self) -> np.ndarray:
        """ネットワークを評価するステップ番号 (データ、物理、物理の直前)"""
        physics = np.asarray(self.cfg.physics_indices, dtype=int)
        data = np.asarray(self.cfg.data_indices, dtype=int)
        steps = np.concatenate([data, physics, physics - 1]) if self.cfg.lambda_dis > 0 else data
        return np.unique(steps)

    def physics_pairs(self, steps: np.ndarray) -> List[Tuple[int, int]]:
        row_of = {int(s): r for r, s in enumerate(steps)}
        return [(row_of[k - 1], row_of[k]) for k in self.cfg.physics_indices]

    def normalize(self, net: MlpParams, steps: np.ndarray) -> MlpParams:
        """t を学習区間で [0, 1] に写す"""
        window = max(float(steps.max()) * self.dt, self.dt)
        return net.with_normalization(input_shift=np.zeros(1), input_scale=np.array([window]))

    def train(self, net: MlpParams, benchmark: np.ndarray,
              checkpoint_hook: Optional[Callable[[int, MlpParams], None]] = None
              ) -> Tuple[MlpParams, List[LossReport]]:
        """
        学習を実行

        Args:
            net: 初期ネットワーク (入力 1、出力 = 全自由度)
            benchmark: ステップ番号で引く参照場 (n_steps + 1, n_dof)

        Returns:
            (学習済みネットワーク, エポックごとの LossReport)
        """
        cfg = self.cfg
        benchmark = np.atleast_2d(np.asarray(benchmark, dtype=float))
        steps = self.evaluation_steps()
        if steps.size == 0:
            raise ValueError("Nothing to train: no data or physics indices")
        if cfg.data_indices and max(cfg.data_indices) >= benchmark.shape[0]:
            raise ValueError("Benchmark snapshots do not cover the data indices")
        if net.input_dim != 1 or net.output_dim != benchmark.shape[1]:
            raise ValueError(f"Network must map 1 input to {benchmark.shape[1]} outputs, got "
                             f"{net.input_dim} -> {net.output_dim}")

        use_physics = cfg.lambda_dis > 0 and len(cfg.physics_indices) > 0
        pairs = self.physics_pairs(steps) if use_physics else []
        row_of = {int(s): r for r, s in enumerate(steps)}
        data_rows = [row_of[k] for k in cfg.data_indices]
        targets = np.zeros((steps.size, benchmark.shape[1]))
        for k, r in zip(cfg.data_indices, data_rows):
            targets[r] = benchmark[k]
        times = (steps * self.dt).reshape(-1, 1)

        params = self.normalize(net, steps)
        state = AdamState.create(params, lr=cfg.lr)
        reports: List[LossReport] = []
        jac = None
        start = time.time()

        self.logger.info(f"Training FOM network: {params.n_parameters} parameters, "
                         f"{len(data_rows)} data rows, {len(pairs)} physics rows, {cfg.epochs} epochs")

        for epoch in range(cfg.epochs):
            U_pred, cache = forward(params, times)
            l_data = loss_data(U_pred, targets, data_rows)
            cot = cfg.lambda_data * loss_data_cotangent(U_pred, targets, data_rows)

            l_eqn = 0.0
            l_dis = 0.0
            if use_physics:
                prev_rows = U_pred[[p for p, _ in pairs]]
                cur_rows = U_pred[[c for _, c in pairs]]
                try:
                    R = self.solver.residual(prev_rows, cur_rows)
                    if epoch % cfg.k_int == 0 or jac is None:
                        jac = self._refresh_jacobian(U_pred, pairs)
                        self.logger.debug(f"Epoch {epoch}: Jacobian refreshed")
                except TrainingAborted:
                    raise
                except Exception as e:
                    raise TrainingAborted(f"Solver failure: {e}", epoch,
                                          getattr(e, "request_id", None)) from e
                l_eqn = loss_eqn(R)
                surrogate = loss_dis(R, jac, U_pred, include_previous=cfg.correction)
                l_dis = surrogate.value
                cot = cot + cfg.lambda_dis * surrogate.cotangent

            l_total = cfg.lambda_dis * l_dis + cfg.lambda_data * l_data
            if not all(np.isfinite(v) for v in (l_data, l_eqn, l_dis)):
                raise TrainingAborted("Non-finite loss", epoch)

            grad = backward_params(params, cache, cot)
            try:
                params, state = adam_step(state, params, grad)
            except ValueError as e:
                raise TrainingAborted(str(e), epoch) from e

            reports.append(LossReport(epoch=epoch, loss_data=l_data, loss_eqn=l_eqn,
                                      loss_dis=l_dis, loss_total=l_total,
                                      wall_time=time.time() - start))
            if cfg.log_every and epoch % cfg.log_every == 0:
                self.logger.info(f"Epoch {epoch}: L_data={l_data:.3e} L_eqn={l_eqn:.3e} L={l_total:.3e}")
            if checkpoint_hook and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint_hook(epoch, params)

        self.logger.info(f"Training finished in {time.time() - start:.1f}s")
        return params, reports

    def _refresh_jacobian(self, U_pred: np.ndarray, pairs: List[Tuple[int, int]]):
        if self.cfg.correction:
            return self.solver.jacobian(U_pred, pairs, mode=self.cfg.jacobian_mode, fd_eps=self.cfg.fd_eps)
        # 補正なし: 各行の A のみ (前時刻への依存は無視)
        return self.solver.jacobian(U_pred, pairs, mode="analytic", fd_eps=self.cfg.fd_eps,
                                    include_previous=False)


def train_fom(cfg: FomTrainConfig, net: MlpParams, benchmark: np.ndarray, solver, dt: float,
              debug: bool = False, checkpoint_hook=None) -> Tuple[MlpParams, List[LossReport]]:
    trainer = FomTrainer(cfg, solver, dt, debug=debug)
    return trainer.train(net, benchmark, checkpoint_hook=checkpoint_hook)
