#!/usr/bin/env python3
import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from typing import Any, Dict, List, Optional

import numpy as np

# 環境変数を .env ファイルから読み込み
try:
    sys.path.append(os.path.join(os.path.dirname(__file__), '..'))
    from scripts.load_env import load_env
    load_env()
except ImportError:
    pass  # スクリプトがない場合はスキップ

from artifact_store import ArtifactStore
from dispinn_fom import (FomTrainConfig, FomTrainer, max_abs_errors, predict_fields,
                         relative_l2_errors)
from dispinn_rom import (RomTrainConfig, RomTrainer, build_rom_dataset, predict_coefficients)
from fv_core import (Field, StepProblem, TransportConfig, build_grid, cfl_number,
                     conservation_budget, initial_pulse, march)
from nn_autodiff import MlpParams, init_mlp
from pod_rom import (PodBasis, ReducedState, ReducedSystem, SnapshotSet, collect_snapshots, pod,
                     project_operators, rom_march)
from solver_daemon import (DEFAULT_MAX_FRAME_BYTES, DEFAULT_TIMEOUT, InProcessSolver, SolverDaemon,
                           fom_problem_document, open_solver, rom_problem_document)

FOM_SNAPSHOTS = "fom_snapshots.csv"
ROM_SNAPSHOTS = "rom_snapshots.bin"
POD_BASIS = "pod_basis.bin"
REDUCED_SYSTEM = "reduced_system.bin"
FOM_MODEL = "fom_model.bin"
ROM_MODEL = "rom_model.bin"

DEFAULT_CONFIG: Dict[str, Any] = {
    "grid": {"nx": 21, "ny": 21, "lx": 1.0, "ly": 1.0},
    "transport": asdict(TransportConfig()),
    "run": {"t_end": 0.35, "n_steps": None, "pulse_lo": 0.25, "pulse_hi": 0.5, "pulse_value": 1.0},
    "network": {"hidden_layers": [124, 100, 80, 64], "activation": "softplus"},
    "training": {"fom": asdict(FomTrainConfig()), "rom": asdict(RomTrainConfig())},
    "pod": {"n_modes": 20, "snapshot_every": 10, "method": "jacobi", "nu_eval": 0.01},
    "daemon": {"listen": "127.0.0.1:7878", "max_frame_bytes": DEFAULT_MAX_FRAME_BYTES,
               "timeout": DEFAULT_TIMEOUT, "status_port": None},
    "seed": 0,
}


class ConfigError(ValueError):
    """設定ファイルの検証エラー (違反をすべて保持)"""

    def __init__(self, errors: List[str]):
        super().__init__("Invalid configuration:\n  - " + "\n  - ".join(errors))
        self.errors = errors


def _type_ok(default: Any, value: Any) -> bool:
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _merge(defaults: Dict[str, Any], overrides: Dict[str, Any], path: str, errors: List[str]) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            errors.append(f"Unknown key: {where}")
            continue
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                errors.append(f"{where} must be an object")
                continue
            merged[key] = _merge(default, value, where, errors)
        elif not _type_ok(default, value):
            errors.append(f"{where} has type {type(value).__name__}, expected {type(default).__name__}")
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[str] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """
    RunConfig を読み込んで既定値とマージし、検証する

    Raises:
        ConfigError: 未知のキー、型の不一致、値の制約違反 (すべてまとめて報告)
    """
    overrides: Dict[str, Any] = {}
    errors: List[str] = []
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                overrides = json.load(f)
        except FileNotFoundError:
            raise ConfigError([f"Config file not found: {path}"])
        except json.JSONDecodeError as e:
            raise ConfigError([f"Config file is not valid JSON: {e}"])
        if not isinstance(overrides, dict):
            raise ConfigError(["Config document must be a JSON object"])
    config = _merge(DEFAULT_CONFIG, overrides, "", errors)
    if seed is not None:
        config["seed"] = seed

    checks = [
        ("grid", lambda c: build_grid(**c["grid"])),
        ("transport", lambda c: TransportConfig(**c["transport"])),
        ("training.fom", lambda c: FomTrainConfig(**c["training"]["fom"])),
        ("training.rom", lambda c: RomTrainConfig(**c["training"]["rom"])),
    ]
    for name, check in checks:
        try:
            check(config)
        except (TypeError, ValueError) as e:
            errors.append(f"{name}: {e}")
    if config["network"]["activation"] not in ("softplus", "tanh"):
        errors.append(f"network.activation: unknown activation {config['network']['activation']}")
    if not all(isinstance(n, int) and n > 0 for n in config["network"]["hidden_layers"]):
        errors.append("network.hidden_layers must be positive integers")
    if config["pod"]["n_modes"] < 1:
        errors.append("pod.n_modes must be >= 1")
    if config["pod"]["snapshot_every"] < 1:
        errors.append("pod.snapshot_every must be >= 1")
    if config["run"]["t_end"] < 0:
        errors.append("run.t_end must be non-negative")
    if errors:
        raise ConfigError(errors)
    return config


class DisPinnPipeline:
    def __init__(self, config: Dict[str, Any], out_dir: str = "runs/latest",
                 solver_handle: Optional[str] = None, debug_mode: bool = False):
        self.config = config
        self.debug_mode = debug_mode
        self.solver_handle = solver_handle or os.environ.get('DISPINN_SOLVER', 'inproc')
        self.store = ArtifactStore(out_dir, debug=debug_mode)
        self.grid = build_grid(**config["grid"])
        self.transport = TransportConfig(**config["transport"])

    def debug_print(self, message: str, data: Any = None):
        """デバッグモード時のみ詳細情報を出力"""
        if self.debug_mode:
            print(f"[DEBUG] {message}")
            if data is not None:
                if isinstance(data, (dict, list)):
                    print(json.dumps(data, indent=2, ensure_ascii=False))
                else:
                    print(data)
            print("-" * 50)

    def echo_config(self):
        path = self.store.write_json("resolved_config.json", self.config)
        self.debug_print(f"Resolved configuration written to {path}", self.config)

    def n_steps(self) -> int:
        run = self.config["run"]
        if run["n_steps"] is not None:
            return int(run["n_steps"])
        return int(round(run["t_end"] / self.transport.dt))

    def initial_field(self) -> Field:
        run = self.config["run"]
        return initial_pulse(self.grid, run["pulse_lo"], run["pulse_hi"], run["pulse_value"])

    def network(self, n_in: int, n_out: int) -> MlpParams:
        net_cfg = self.config["network"]
        sizes = [n_in] + list(net_cfg["hidden_layers"]) + [n_out]
        return init_mlp(sizes, activation=net_cfg["activation"], seed=self.config["seed"])

    def evaluation_nus(self, rom_cfg: RomTrainConfig) -> List[float]:
        """学習済み ν と未学習 ν (重複なし)"""
        nus = [float(nu) for nu in rom_cfg.train_nus]
        held_out = float(self.config["pod"]["nu_eval"])
        if not np.any(np.isclose(nus, held_out)):
            nus.append(held_out)
        return nus

    # ------------------------------------------------------------ commands

    def run_fom(self) -> str:
        """全次元モデルを時間発展してスナップショットファイルを書く"""
        n_steps = self.n_steps()
        if n_steps < 1:
            raise ValueError("nothing to do: n_steps must be >= 1")
        u0 = self.initial_field()
        print(f"\n🚀 FOM run: {self.grid.nx}x{self.grid.ny} cells, dt={self.transport.dt}, {n_steps} steps")
        print(f"   Initial CFL number: {cfl_number(self.grid, self.transport, u0):.3f}")
        snapshots = march(self.grid, self.transport, u0, n_steps)

        storage, budget = conservation_budget(self.grid, self.transport, u0, snapshots[0])
        self.debug_print("First-step conservation budget:",
                         {"storage": storage.tolist(), "boundary_and_source": budget.tolist()})
        peak = max(float(np.max(np.abs(s.values))) for s in snapshots)
        print(f"📊 {len(snapshots)} snapshots, max |u| = {peak:.4f}")

        path = self.store.write_snapshots(FOM_SNAPSHOTS, self.grid, self.transport.dt, [u0] + snapshots)
        print(f"✅ Snapshots written to {path}")
        return path

    def build_pod(self):
        """学習用 ν のスナップショットから POD 基底と縮約系を作る"""
        pod_cfg = self.config["pod"]
        rom_cfg = RomTrainConfig(**self.config["training"]["rom"])
        n_steps = self.n_steps()
        if n_steps < 1:
            raise ValueError("nothing to do: n_steps must be >= 1")
        nus = list(rom_cfg.train_nus)
        print(f"\n🚀 Collecting snapshots for nu = {nus} (+ held-out {pod_cfg['nu_eval']})")
        u0 = self.initial_field()
        train_set = collect_snapshots(self.grid, self.transport, u0, nus, n_steps, pod_cfg["snapshot_every"])
        sets = [train_set]
        if not np.any(np.isclose(nus, pod_cfg["nu_eval"])):
            sets.append(collect_snapshots(self.grid, self.transport, u0, [pod_cfg["nu_eval"]], n_steps,
                                          pod_cfg["snapshot_every"]))
        if pod_cfg["n_modes"] > train_set.n_snapshots:
            raise ValueError(f"n_modes ({pod_cfg['n_modes']}) exceeds the snapshot count "
                             f"({train_set.n_snapshots})")

        basis = pod(train_set, pod_cfg["n_modes"], method=pod_cfg["method"])
        energy = basis.energy_fraction()
        print(f"📊 {basis.n_modes} modes, captured energy {energy[basis.n_modes - 1]:.8f}")
        system = project_operators(self.grid, self.transport, basis)

        all_snapshots = SnapshotSet.concatenate(sets)
        self.store.write_document(ROM_SNAPSHOTS, {"kind": "snapshot_set", "grid": self.grid.to_dict(),
                                                  "n_components": 2},
                                  [("Z", all_snapshots.Z), ("times", all_snapshots.times),
                                   ("nus", all_snapshots.nus)])
        header, arrays = basis.to_document(self.grid)
        self.store.write_document(POD_BASIS, header, arrays)
        header, arrays = system.to_document()
        self.store.write_document(REDUCED_SYSTEM, header, arrays)
        self.store.write_tidy_csv("pod_energy.csv", [(float(i + 1), "energy_fraction", float(e))
                                                     for i, e in enumerate(energy)])
        print(f"✅ POD basis and reduced system written to {self.store.out_dir}")
        return basis, system

    def load_rom_artifacts(self):
        header, arrays = self.store.read_document(ROM_SNAPSHOTS)
        snapshots = SnapshotSet(Z=arrays["Z"], times=arrays["times"], nus=arrays["nus"],
                                grid=self.grid, n_components=int(header["n_components"]))
        basis = PodBasis.from_document(*self.store.read_document(POD_BASIS))
        system = ReducedSystem.from_document(*self.store.read_document(REDUCED_SYSTEM))
        return snapshots, basis, system

    def _snapshots_for(self, snapshots: SnapshotSet, nu: float):
        cols = np.nonzero(np.isclose(snapshots.nus, nu))[0]
        if cols.size == 0:
            raise ValueError(f"No reference snapshots for nu={nu}; rerun pod-build")
        cols = cols[np.argsort(snapshots.times[cols])]
        return snapshots.times[cols], snapshots.Z[:, cols].T

    def run_rom(self) -> Dict[str, float]:
        """POD-Galerkin の時間積分と FOM との比較"""
        if not os.path.exists(self.store.path(POD_BASIS)):
            self.build_pod()
        snapshots, basis, system = self.load_rom_artifacts()
        rom_cfg = RomTrainConfig(**self.config["training"]["rom"])
        every = self.config["pod"]["snapshot_every"]
        dt = self.transport.dt
        rows = []
        worst: Dict[str, float] = {}
        for nu in self.evaluation_nus(rom_cfg):
            times, reference = self._snapshots_for(snapshots, nu)
            n_steps = int(round((times[-1] - times[0]) / dt))
            a0 = ReducedState(a=basis.project(reference[0]), nu=nu)
            trajectory = rom_march(system.with_nu(nu), a0, dt, n_steps)
            sampled = trajectory[::every][:len(times)]
            fields = basis.reconstruct(sampled.T).T
            errors = relative_l2_errors(fields, reference)
            worst[f"galerkin_nu{nu:g}"] = float(errors.max())
            rows += [(float(t), f"galerkin_nu{nu:g}", float(e)) for t, e in zip(times, errors)]
            print(f"📊 nu={nu:g}: max relative L2 error {errors.max():.4e}")
        self.store.write_tidy_csv("rom_errors.csv", rows)
        print("✅ POD-Galerkin run completed")
        return worst

    def train_fom(self) -> MlpParams:
        """全次元ソルバーと結合して学習"""
        if not os.path.exists(self.store.path(FOM_SNAPSHOTS)):
            self.run_fom()
        reference = self.store.read_snapshots(FOM_SNAPSHOTS)
        benchmark = reference.data
        cfg = FomTrainConfig(**self.config["training"]["fom"])
        net = self.network(1, benchmark.shape[1])
        print(f"\n🧪 Training FOM DisPINN ({net.n_parameters} parameters, solver={self.solver_handle})")

        problems = [fom_problem_document(self.grid, self.transport)] if cfg.lambda_dis > 0 else []
        solver = open_solver(self.solver_handle, problems, timeout=self.config["daemon"]["timeout"])
        try:
            trainer = FomTrainer(cfg, solver, self.transport.dt, debug=self.debug_mode)
            params, reports = trainer.train(net, benchmark, checkpoint_hook=self._checkpoint(FOM_MODEL))
        finally:
            solver.close()

        self.store.write_loss_log("fom_loss.csv", reports)
        header, arrays = params.to_document()
        self.store.write_document(FOM_MODEL, header, arrays)

        prediction = predict_fields(params, reference.times)
        self.store.write_snapshots("fom_prediction.csv", self.grid, self.transport.dt,
                                   [Field.from_flat(row, 2, time=float(t)) for t, row in zip(reference.times, prediction)])
        rel = relative_l2_errors(prediction, benchmark)
        abs_err = max_abs_errors(prediction, benchmark)
        rows = [(float(t), "relative_l2", float(e)) for t, e in zip(reference.times, rel)]
        rows += [(float(t), "max_abs", float(e)) for t, e in zip(reference.times, abs_err)]
        rows += [(float(r.epoch), name, float(getattr(r, name))) for r in reports
                 for name in ("loss_data", "loss_eqn")]
        self.store.write_tidy_csv("fom_plot.csv", rows)
        print(f"✅ Training finished: final L_eqn={reports[-1].loss_eqn:.3e}, "
              f"max relative L2={rel.max():.4e}")
        return params

    def train_rom(self) -> MlpParams:
        """縮約系と結合して学習し、学習済み ν と未学習 ν で評価"""
        if not os.path.exists(self.store.path(POD_BASIS)):
            self.build_pod()
        snapshots, basis, system = self.load_rom_artifacts()
        cfg = RomTrainConfig(**self.config["training"]["rom"])
        dataset = build_rom_dataset(snapshots, basis, cfg.data_fractions, nus=cfg.train_nus)
        net = self.network(2, basis.n_modes)
        print(f"\n🧪 Training ROM DisPINN ({net.n_parameters} parameters, {dataset.inputs.shape[0]} rows, "
              f"solver={self.solver_handle})")

        use_solver = cfg.lambda_mom > 0 or cfg.lambda_pressure > 0
        problems = [rom_problem_document(system)] if use_solver else []
        solver = open_solver(self.solver_handle, problems, timeout=self.config["daemon"]["timeout"])
        try:
            trainer = RomTrainer(cfg, solver, debug=self.debug_mode)
            params, reports = trainer.train(net, dataset, checkpoint_hook=self._checkpoint(ROM_MODEL))
        finally:
            solver.close()

        self.store.write_loss_log("rom_loss.csv", reports)
        header, arrays = params.to_document()
        self.store.write_document(ROM_MODEL, header, arrays)

        rows = []
        for nu in self.evaluation_nus(cfg):
            times, reference = self._snapshots_for(snapshots, nu)
            Q = predict_coefficients(params, times, nu)
            fields = basis.reconstruct(Q[:, :basis.n_modes].T).T
            errors = relative_l2_errors(fields, reference)
            rows += [(float(t), f"dispinn_nu{nu:g}", float(e)) for t, e in zip(times, errors)]
            print(f"📊 nu={nu:g}: max relative L2 error {errors.max():.4e}")
        rows += [(float(r.epoch), name, float(getattr(r, name))) for r in reports
                 for name in ("loss_data", "loss_eqn")]
        self.store.write_tidy_csv("rom_plot.csv", rows)
        print("✅ ROM training finished")
        return params

    def evaluate(self, pred_file: str, ref_file: str) -> np.ndarray:
        """時刻ごとの相対 L2 誤差を CSV で出力"""
        pred = self.store.read_snapshots(pred_file)
        ref = self.store.read_snapshots(ref_file)
        if pred.data.shape != ref.data.shape:
            raise ValueError(f"Prediction shape {pred.data.shape} does not match reference {ref.data.shape}")
        errors = relative_l2_errors(pred.data, ref.data)
        print("time,relative_l2")
        for t, e in zip(ref.times, errors):
            print(f"{t:.17g},{e:.17g}")
        print(f"max,{errors.max():.17g}")
        self.store.write_tidy_csv("eval.csv", [(float(t), "relative_l2", float(e)) for t, e in zip(ref.times, errors)])
        return errors

    def serve(self, listen: Optional[str] = None, problem: Optional[str] = None,
              max_frame_bytes: Optional[int] = None, status_port: Optional[int] = None) -> SolverDaemon:
        """ソルバーデーモンを起動 (shutdown コマンドまで戻らない)"""
        daemon_cfg = self.config["daemon"]
        solver = InProcessSolver(problem=StepProblem(self.grid, self.transport))
        if problem:
            solver.reduced = ReducedSystem.from_document(*self.store.read_document(problem))
        daemon = SolverDaemon(listen or daemon_cfg["listen"], solver=solver,
                              max_frame_bytes=max_frame_bytes or daemon_cfg["max_frame_bytes"],
                              debug=self.debug_mode)
        port = status_port if status_port is not None else daemon_cfg["status_port"]
        if port is not None:
            from status_server import start_status_server
            start_status_server(daemon, port)
        print(f"\n🚀 Starting solver daemon on {listen or daemon_cfg['listen']}")
        daemon.serve()
        return daemon

    def _checkpoint(self, name: str):
        def hook(epoch: int, params: MlpParams):
            header, arrays = params.to_document()
            header["epoch"] = epoch
            self.store.write_document(name, header, arrays)
        return hook


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dispinn', description='DisPINN laboratory')
    parser.add_argument('--config', type=str, default=None, help='RunConfig JSON file (default: built-in defaults)')
    parser.add_argument('--seed', type=int, default=None, help='Override the configured seed')
    parser.add_argument('--out', type=str, default='runs/latest', help='Output directory (default: runs/latest)')
    parser.add_argument('--solver', type=str, default=None, help='Solver handle: inproc or daemon://host:port')
    parser.add_argument('--log', type=str, default=None, help='Log level (default: DISPINN_LOG_LEVEL or INFO)')
    parser.add_argument('--debug', action='store_true', help='Enable debug mode with detailed logging')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('fom-run', help='Run the full-order solver and write snapshots')
    sub.add_parser('pod-build', help='Build the POD basis and reduced operators')
    sub.add_parser('rom-run', help='Run the POD-Galerkin baseline')
    sub.add_parser('train-fom', help='Train the network coupled with the full-order solver')
    sub.add_parser('train-rom', help='Train the network coupled with the reduced system')
    eval_parser = sub.add_parser('eval', help='Relative L2 error per time instant')
    eval_parser.add_argument('pred', help='Predicted snapshot file')
    eval_parser.add_argument('ref', help='Reference snapshot file')
    serve_parser = sub.add_parser('serve', help='Run the solver daemon')
    serve_parser.add_argument('--listen', type=str, default=None, help='host:port or unix socket path')
    serve_parser.add_argument('--problem', type=str, default=None, help='Reduced system file to preload')
    serve_parser.add_argument('--max-frame-bytes', type=int, default=None, help='Largest accepted frame')
    serve_parser.add_argument('--status-port', type=int, default=None, help='Port of the HTTP status endpoint')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log or os.environ.get('DISPINN_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(level=logging.DEBUG if args.debug else getattr(logging, level, logging.INFO),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        config = load_run_config(args.config, args.seed)
    except ConfigError as e:
        print(f"❌ {e}")
        return 1

    try:
        pipeline = DisPinnPipeline(config, out_dir=args.out, solver_handle=args.solver, debug_mode=args.debug)
        pipeline.echo_config()
        if args.command == 'fom-run':
            pipeline.run_fom()
        elif args.command == 'pod-build':
            pipeline.build_pod()
        elif args.command == 'rom-run':
            pipeline.run_rom()
        elif args.command == 'train-fom':
            pipeline.train_fom()
        elif args.command == 'train-rom':
            pipeline.train_rom()
        elif args.command == 'eval':
            pipeline.evaluate(args.pred, args.ref)
        elif args.command == 'serve':
            pipeline.serve(args.listen, args.problem, args.max_frame_bytes, args.status_port)
        pipeline.debug_print("Output directory:", pipeline.store.get_store_stats())
    except Exception as e:
        print(f"\n❌ {args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
