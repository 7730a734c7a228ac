#!/usr/bin/env python3
"""
縮約系と結合した DisPINN 学習

入力 (t, ν) から縮約係数 Q = [a | b_p] を出力するネットワークを学習する。
運動量残差 R_red1 = ȧ - X(a, b) の ȧ はネットワークの入力方向微分で求め、
X の依存は縮約系から取り込んだ ∂X/∂Q (切り離された定数) で補正する。
連続の式の残差 R_red2 = P_r a は線形なので補正は常に厳密。
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dispinn_fom import LossReport, SurrogateLoss, TrainingAborted
from nn_autodiff import (AdamState, ForwardCache, MlpParams, adam_step, backward_joint,
                         forward_with_tangent)
from pod_rom import PodBasis, ReducedSystem, SnapshotSet, reduced_rhs_rows

logger = logging.getLogger(__name__)

TIME_DIRECTION = np.array([1.0, 0.0])


@dataclass
class RomTrainConfig:
    lambda_mom: float = 1.0
    lambda_pressure: float = 1.0
    lambda_data: float = 1.0
    k_int: int = 20
    epochs: int = 5000
    lr: float = 0.001
    train_nus: List[float] = field(default_factory=lambda: [0.008, 0.012])
    data_fractions: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    correction: bool = True
    jacobian_mode: str = "finite_difference"
    fd_eps: float = 1e-6
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.k_int < 1:
            raise ValueError(f"k_int must be >= 1, got {self.k_int}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if min(self.lambda_mom, self.lambda_pressure, self.lambda_data) < 0:
            raise ValueError("Loss weights must be non-negative")
        if any(f < 0 or f > 1 for f in self.data_fractions):
            raise ValueError("data_fractions must lie in [0, 1]")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"Unknown jacobian_mode: {self.jacobian_mode}")


@dataclass
class RomDataset:
    """(t, ν) の入力行と参照係数"""
    inputs: np.ndarray
    targets: np.ndarray
    data_rows: np.ndarray
    n_u: int

    @property
    def nus(self) -> np.ndarray:
        return np.unique(self.inputs[:, 1])

    def rows_for(self, nu: float) -> np.ndarray:
        return np.nonzero(self.inputs[:, 1] == nu)[0]


@dataclass
class RomPrediction:
    Q: np.ndarray
    a_dot: np.ndarray
    cache: ForwardCache
    n_u: int

    @property
    def a(self) -> np.ndarray:
        return self.Q[:, :self.n_u]

    @property
    def b_p(self) -> np.ndarray:
        return self.Q[:, self.n_u:]


def build_rom_dataset(snapshots: SnapshotSet, basis: PodBasis,
                      data_fractions: Sequence[float],
                      nus: Optional[Sequence[float]] = None) -> RomDataset:
    """
    スナップショットを基底に射影して学習データを作る

    各 ν の時刻列で、data_fractions の位置 (先頭 0、末尾 1) をデータ行とする。
    """
    selected = snapshots.nus if nus is None else np.asarray(nus, dtype=float)
    inputs, targets, data_rows = [], [], []
    offset = 0
    for nu in np.unique(selected):
        cols = np.nonzero(np.isclose(snapshots.nus, nu))[0]
        if cols.size == 0:
            raise ValueError(f"No snapshots for nu={nu}")
        cols = cols[np.argsort(snapshots.times[cols])]
        coeffs = basis.project(snapshots.Z[:, cols]).T
        n_t = cols.size
        inputs.append(np.column_stack([snapshots.times[cols], np.full(n_t, nu)]))
        targets.append(coeffs)
        picks = sorted({int(round(f * (n_t - 1))) for f in data_fractions})
        data_rows += [offset + p for p in picks]
        offset += n_t
    return RomDataset(inputs=np.vstack(inputs), targets=np.vstack(targets),
                      data_rows=np.array(data_rows, dtype=int), n_u=basis.n_modes)


def normalize_network(net: MlpParams, dataset: RomDataset) -> MlpParams:
    """t を [0, 1] に、ν を標準化、出力をモードごとに標準化"""
    t_max = max(float(dataset.inputs[:, 0].max()), 1e-12)
    nu_mean = float(dataset.inputs[:, 1].mean())
    nu_std = float(dataset.inputs[:, 1].std())
    mean = dataset.targets.mean(axis=0)
    std = dataset.targets.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    return net.with_normalization(
        input_shift=np.array([0.0, nu_mean]),
        input_scale=np.array([t_max, nu_std if nu_std > 0 else 1.0]),
        output_shift=mean,
        output_scale=std,
    )


def predict(params: MlpParams, inputs: np.ndarray, n_u: int) -> RomPrediction:
    Q, tangent, cache = forward_with_tangent(params, inputs, TIME_DIRECTION)
    return RomPrediction(Q=Q, a_dot=tangent[:, :n_u], cache=cache, n_u=n_u)


def _standardized_data(pred: RomPrediction, dataset: RomDataset,
                       scale: np.ndarray) -> Tuple[float, np.ndarray]:
    rows = dataset.data_rows
    cot = np.zeros_like(pred.Q)
    if rows.size == 0:
        return 0.0, cot
    diff = (pred.Q[rows] - dataset.targets[rows]) / scale
    cot[rows] = 2.0 * diff / scale / diff.size
    return float(np.mean(diff * diff)), cot


def rom_losses(pred: RomPrediction, systems: Dict[float, ReducedSystem], dataset: RomDataset,
               cfg: RomTrainConfig, scale: Optional[np.ndarray] = None) -> Tuple[float, float, float]:
    """(L_Data, L_eqn_mom, L_eqn_pressure) を縮約系から直接評価"""
    if pred.Q.shape[0] != dataset.inputs.shape[0]:
        raise ValueError("Prediction rows do not match the dataset")
    scale = np.ones(pred.Q.shape[1]) if scale is None else scale
    l_data, _ = _standardized_data(pred, dataset, scale)
    r1_rows, r2_rows = [], []
    for nu in dataset.nus:
        rows = dataset.rows_for(nu)
        sys = systems[float(nu)]
        b_rows = pred.b_p[rows] if sys.n_p else None
        r1_rows.append(pred.a_dot[rows] - reduced_rhs_rows(sys, pred.a[rows], b_rows))
        if sys.P is not None:
            r2_rows.append(pred.a[rows] @ sys.P.T)
    R1 = np.vstack(r1_rows)
    l_mom = float(np.mean(R1 * R1))
    l_p = float(np.mean(np.vstack(r2_rows) ** 2)) if r2_rows else 0.0
    return l_data, l_mom, l_p


def loss_dis_mom(pred: RomPrediction, R1: np.ndarray, jac: Optional[np.ndarray],
                 rows: Optional[np.ndarray] = None, correction: bool = True) -> Tuple[SurrogateLoss, np.ndarray]:
    """
    運動量の補正付き代理損失

    Args:
        pred: 予測
        R1: 運動量残差 (n_rows, n_u)
        jac: ∂X/∂Q (n_rows, n_u, n_q)、correction=False なら不要
        rows: R1 の各行に対応する予測行 (省略時は全行)

    Returns:
        (Q に対する余接を持つ SurrogateLoss, ȧ に対する余接)
    """
    rows = np.arange(pred.Q.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    R1 = np.atleast_2d(R1)
    n = R1.size
    q_cot = np.zeros_like(pred.Q)
    adot_cot = np.zeros_like(pred.a_dot)
    if n == 0:
        return SurrogateLoss(0.0, q_cot), adot_cot
    np.add.at(adot_cot, rows, (2.0 / n) * R1)
    value = float((2.0 / n) * np.sum(R1 * R1))
    if correction:
        if jac is None:
            raise ValueError("Jacobian is required for the corrected momentum loss")
        np.add.at(q_cot, rows, -(2.0 / n) * np.einsum("ni,niq->nq", R1, jac))
        value += float(np.sum(q_cot * pred.Q))
    return SurrogateLoss(value, q_cot), adot_cot


def loss_dis_pressure(pred: RomPrediction, R2: np.ndarray, P: np.ndarray,
                      rows: Optional[np.ndarray] = None) -> SurrogateLoss:
    """連続の式の代理損失 [2 R2 (P | 0)]_detached · Q / N"""
    rows = np.arange(pred.Q.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    R2 = np.atleast_2d(R2)
    q_cot = np.zeros_like(pred.Q)
    if R2.size == 0:
        return SurrogateLoss(0.0, q_cot)
    np.add.at(q_cot[:, :pred.n_u], rows, (2.0 / R2.size) * R2 @ P)
    return SurrogateLoss(float(np.sum(q_cot * pred.Q)), q_cot)


class RomTrainer:
    """縮約系と結合した学習ループ"""

    def __init__(self, cfg: RomTrainConfig, solver, debug: bool = False):
        self.cfg = cfg
        self.solver = solver
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

    def train(self, net: MlpParams, dataset: RomDataset,
              checkpoint_hook: Optional[Callable[[int, MlpParams], None]] = None
              ) -> Tuple[MlpParams, List[LossReport]]:
        cfg = self.cfg
        if net.input_dim != 2 or net.output_dim != dataset.targets.shape[1]:
            raise ValueError(f"Network must map (t, nu) to {dataset.targets.shape[1]} outputs, got "
                             f"{net.input_dim} -> {net.output_dim}")
        n_u = dataset.n_u
        use_mom = cfg.lambda_mom > 0
        use_pressure = cfg.lambda_pressure > 0 and net.output_dim > n_u
        groups = [(float(nu), dataset.rows_for(nu)) for nu in dataset.nus]

        params = normalize_network(net, dataset)
        scale = params.output_scale.copy()
        state = AdamState.create(params, lr=cfg.lr)
        jacobians: Dict[float, np.ndarray] = {}
        reports: List[LossReport] = []
        start = time.time()

        self.logger.info(f"Training ROM network: {params.n_parameters} parameters, "
                         f"{dataset.inputs.shape[0]} rows over {len(groups)} nu values, {cfg.epochs} epochs")

        for epoch in range(cfg.epochs):
            pred = predict(params, dataset.inputs, n_u)
            l_data, cot = _standardized_data(pred, dataset, scale)
            cot = cfg.lambda_data * cot
            tangent_cot = np.zeros_like(pred.Q)
            l_mom = l_dis_mom = l_p = l_dis_p = 0.0

            if use_mom or use_pressure:
                try:
                    refresh = epoch % cfg.k_int == 0 or not jacobians
                    r1_all, r2_all = [], []
                    for nu, rows in groups:
                        X, R2 = self.solver.reduced_rhs(nu, pred.Q[rows])
                        R1 = pred.a_dot[rows] - X
                        if use_mom and cfg.correction and refresh:
                            jacobians[nu] = self.solver.reduced_jacobian(
                                nu, pred.Q[rows], mode=cfg.jacobian_mode, fd_eps=cfg.fd_eps)
                        r1_all.append((rows, R1, jacobians.get(nu)))
                        if R2.size:
                            r2_all.append((rows, R2))
                except Exception as e:
                    raise TrainingAborted(f"Solver failure: {e}", epoch,
                                          getattr(e, "request_id", None)) from e

                rows_cat = np.concatenate([r for r, _, _ in r1_all])
                R1_cat = np.vstack([R for _, R, _ in r1_all])
                l_mom = float(np.mean(R1_cat ** 2))
                if use_mom:
                    jac_cat = np.concatenate([j for _, _, j in r1_all]) if cfg.correction else None
                    surrogate, adot_cot = loss_dis_mom(pred, R1_cat, jac_cat, rows_cat, cfg.correction)
                    l_dis_mom = surrogate.value
                    cot = cot + cfg.lambda_mom * surrogate.cotangent
                    tangent_cot[:, :n_u] += cfg.lambda_mom * adot_cot
                if r2_all:
                    rows_p = np.concatenate([r for r, _ in r2_all])
                    R2_cat = np.vstack([R for _, R in r2_all])
                    l_p = float(np.mean(R2_cat ** 2))
                    if use_pressure:
                        P = self.solver.pressure_operator()
                        surrogate_p = loss_dis_pressure(pred, R2_cat, P, rows_p)
                        l_dis_p = surrogate_p.value
                        cot = cot + cfg.lambda_pressure * surrogate_p.cotangent

            l_total = cfg.lambda_mom * l_dis_mom + cfg.lambda_pressure * l_dis_p + cfg.lambda_data * l_data
            if not all(np.isfinite(v) for v in (l_data, l_mom, l_p, l_total)):
                raise TrainingAborted("Non-finite loss", epoch)

            grad = backward_joint(params, pred.cache, cot, tangent_cot)
            try:
                params, state = adam_step(state, params, grad)
            except ValueError as e:
                raise TrainingAborted(str(e), epoch) from e

            reports.append(LossReport(epoch=epoch, loss_data=l_data, loss_eqn=l_mom,
                                      loss_dis=l_dis_mom, loss_total=l_total,
                                      wall_time=time.time() - start,
                                      loss_eqn_pressure=l_p, loss_dis_pressure=l_dis_p))
            if cfg.log_every and epoch % cfg.log_every == 0:
                self.logger.info(f"Epoch {epoch}: L_data={l_data:.3e} L_mom={l_mom:.3e} "
                                 f"L_p={l_p:.3e} L={l_total:.3e}")
            if checkpoint_hook and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                checkpoint_hook(epoch, params)

        self.logger.info(f"Training finished in {time.time() - start:.1f}s")
        return params, reports


def train_rom(cfg: RomTrainConfig, net: MlpParams, dataset: RomDataset, solver,
              debug: bool = False, checkpoint_hook=None) -> Tuple[MlpParams, List[LossReport]]:
    trainer = RomTrainer(cfg, solver, debug=debug)
    return trainer.train(net, dataset, checkpoint_hook=checkpoint_hook)


def predict_coefficients(params: MlpParams, times: Sequence[float], nu: float) -> np.ndarray:
    times = np.asarray(times, dtype=float).reshape(-1)
    inputs = np.column_stack([times, np.full(times.size, nu)])
    Q, _, _ = forward_with_tangent(params, inputs, TIME_DIRECTION)
    return Q
