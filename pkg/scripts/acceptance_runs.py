#!/usr/bin/env python3
"""
長時間の受け入れ実験 (シード固定)

- 格子細分化で解の変化が減少すること
- FOM 学習の誤差バンド、補正項の有無による L_eqn の順序、外挿誤差の順序
- POD-Galerkin 誤差のモード数に対する単調性
- ROM 学習の順序 (POD-Galerkin <= DisPINN <= データのみ)

使用方法: python scripts/acceptance_runs.py [--only fom|rom|mesh] [--seeds 3] [--epochs 3999]
"""
import argparse
import copy
import csv
import os
import sys
import tempfile
from dataclasses import replace
from datetime import datetime
from typing import Any, Dict, List, Tuple

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli import DisPinnPipeline, load_run_config
from dispinn_fom import FomTrainConfig, FomTrainer, max_abs_errors, predict_fields
from fv_core import Field, TransportConfig, build_grid, initial_pulse, march, restrict_to_coarse
from solver_daemon import fom_problem_document, open_solver


def with_overrides(config: Dict[str, Any], **sections) -> Dict[str, Any]:
    out = copy.deepcopy(config)
    for path, value in sections.items():
        node = out
        keys = path.split("__")
        for key in keys[:-1]:
            node = node[key]
        node[keys[-1]] = value
    return out


def check(name: str, passed: bool, detail: str) -> bool:
    print(f"   {'✅' if passed else '❌'} {name}: {detail}")
    return passed


def mesh_refinement(config: Dict[str, Any]) -> bool:
    """dx, dy, dt を半分にしたとき t = 0.1 の解の変化が減少する"""
    print("🔍 Mesh refinement")
    base = config["grid"]
    t_end = 0.1
    levels = []
    for level in range(3):
        factor = 2 ** level
        grid = build_grid(base["nx"] * factor, base["ny"] * factor, base["lx"], base["ly"])
        cfg = replace(TransportConfig(**config["transport"]), dt=config["transport"]["dt"] / factor)
        n_steps = int(round(t_end / cfg.dt))
        final = march(grid, cfg, initial_pulse(grid), n_steps)[-1]
        for _ in range(level):
            final = Field(restrict_to_coarse(grid, final), time=final.time)
            grid = build_grid(grid.nx // 2, grid.ny // 2, grid.lx, grid.ly)
        levels.append(final.values)
        print(f"   level {level}: {base['nx'] * factor}x{base['ny'] * factor}, {n_steps} steps")
    first = float(np.linalg.norm(levels[1] - levels[0]))
    second = float(np.linalg.norm(levels[2] - levels[1]))
    return check("decreasing change", second < first, f"{first:.4e} -> {second:.4e}")


def fom_training(pipeline: DisPinnPipeline, overrides: Dict[str, Any], benchmark: np.ndarray):
    cfg = FomTrainConfig(**{**pipeline.config["training"]["fom"], **overrides})
    net = pipeline.network(1, benchmark.shape[1])
    solver = open_solver("inproc", [fom_problem_document(pipeline.grid, pipeline.transport)])
    try:
        params, reports = FomTrainer(cfg, solver, pipeline.transport.dt).train(net, benchmark)
    finally:
        solver.close()
    times = np.arange(benchmark.shape[0]) * pipeline.transport.dt
    errors = max_abs_errors(predict_fields(params, times), benchmark)
    return errors, reports


def fom_acceptance(config: Dict[str, Any], seeds: List[int], out_dir: str) -> bool:
    print("🔍 FOM DisPINN")
    ok = True
    sample_steps = [25, 75, 125]
    data_only, physics, dense, with_corr, without_corr = [], [], [], [], []
    for seed in seeds:
        pipeline = DisPinnPipeline(with_overrides(config, seed=seed), out_dir=out_dir)
        if not os.path.exists(pipeline.store.path("fom_snapshots.csv")):
            pipeline.run_fom()
        benchmark = pipeline.store.read_snapshots("fom_snapshots.csv").data

        err_phys, rep_phys = fom_training(pipeline, {}, benchmark)
        err_dense, _ = fom_training(pipeline, {"data_indices": [0, 50, 100]}, benchmark)
        err_data, _ = fom_training(pipeline, {"lambda_dis": 0.0, "data_indices": [0, 50, 100]}, benchmark)
        _, rep_nocorr = fom_training(pipeline, {"correction": False}, benchmark)

        physics.append(err_phys)
        dense.append(err_dense)
        data_only.append(err_data)
        with_corr.append(rep_phys[-1].loss_eqn)
        without_corr.append(rep_nocorr[-1].loss_eqn)
        print(f"   seed {seed}: L_eqn {rep_phys[-1].loss_eqn:.3e} (corrected) vs "
              f"{rep_nocorr[-1].loss_eqn:.3e} (uncorrected)")

    median_phys = np.median([e[sample_steps].max() for e in physics])
    median_dense = np.median([e[sample_steps].max() for e in dense])
    median_data = np.median([e[sample_steps].max() for e in data_only])
    ok &= check("data at t=0 only", median_phys <= 0.26, f"median max-abs {median_phys:.4f}")
    ok &= check("data at 0, 0.05, 0.1", median_dense <= 0.13 and median_dense < median_data,
                f"{median_dense:.4f} (data only {median_data:.4f})")
    wins = sum(a < b for a, b in zip(with_corr, without_corr))
    ok &= check("correction ordering", wins >= (2 * len(seeds) + 2) // 3, f"{wins}/{len(seeds)} seeds")
    extrapolation = all(p[325] < d[325] for p, d in zip(dense, data_only))
    ok &= check("extrapolation at t=0.325", extrapolation,
                ", ".join(f"{p[325]:.3f}<{d[325]:.3f}" for p, d in zip(dense, data_only)))
    return bool(ok)


def rom_acceptance(config: Dict[str, Any], seeds: List[int], out_dir: str) -> bool:
    print("🔍 POD-Galerkin and ROM DisPINN")
    ok = True
    worst_by_modes: List[Tuple[int, float]] = []
    for n_modes in (5, 10, 20):
        pipeline = DisPinnPipeline(with_overrides(config, pod__n_modes=n_modes),
                                   out_dir=os.path.join(out_dir, f"modes{n_modes}"))
        pipeline.build_pod()
        worst = pipeline.run_rom()
        train = [v for k, v in worst.items()
                 if any(k == f"galerkin_nu{nu:g}" for nu in config["training"]["rom"]["train_nus"])]
        worst_by_modes.append((n_modes, max(train)))
    values = [w for _, w in worst_by_modes]
    ok &= check("Galerkin error non-increasing in modes", all(b <= a for a, b in zip(values, values[1:])),
                " -> ".join(f"{n}: {w:.4e}" for n, w in worst_by_modes))

    rom_dir = os.path.join(out_dir, "modes20")
    galerkin = values[-1]
    dispinn, data_only, held_dis, held_data = [], [], [], []
    held_out = config["pod"]["nu_eval"]
    for seed in seeds:
        for variant, sink, held in (("dispinn", dispinn, held_dis), ("data", data_only, held_data)):
            cfg = with_overrides(config, seed=seed)
            if variant == "data":
                cfg = with_overrides(cfg, training__rom__lambda_mom=0.0, training__rom__lambda_pressure=0.0)
            pipeline = DisPinnPipeline(cfg, out_dir=rom_dir)
            pipeline.train_rom()
            errors = _rom_errors(pipeline, held_out)
            sink.append(errors["train"])
            held.append(errors["held_out"])
        print(f"   seed {seed}: DisPINN {dispinn[-1]:.4e}, data only {data_only[-1]:.4e}")

    med_dis, med_data = np.median(dispinn), np.median(data_only)
    ok &= check("Galerkin <= DisPINN <= data only", galerkin <= med_dis <= med_data,
                f"{galerkin:.4e} / {med_dis:.4e} / {med_data:.4e}")
    wins = sum(a < b for a, b in zip(held_dis, held_data))
    ok &= check("held-out nu ordering", wins >= int(np.ceil(0.8 * len(seeds))), f"{wins}/{len(seeds)} seeds")
    return bool(ok)


def _rom_errors(pipeline: DisPinnPipeline, held_out: float) -> Dict[str, float]:
    worst = {"train": 0.0, "held_out": 0.0}
    with open(pipeline.store.path("rom_plot.csv"), newline="") as f:
        for row in csv.DictReader(f):
            if not row["series"].startswith("dispinn_nu"):
                continue
            key = "held_out" if row["series"] == f"dispinn_nu{held_out:g}" else "train"
            worst[key] = max(worst[key], float(row["value"]))
    return worst


def main():
    parser = argparse.ArgumentParser(description='Seeded acceptance experiments')
    parser.add_argument('--config', type=str, default=None, help='RunConfig JSON file')
    parser.add_argument('--only', choices=['mesh', 'fom', 'rom'], default=None, help='Run one group only')
    parser.add_argument('--seeds', type=int, default=3, help='Number of seeds (ROM ordering uses 10 in the full run)')
    parser.add_argument('--epochs', type=int, default=None, help='Override training epochs')
    parser.add_argument('--out', type=str, default=None, help='Working directory (default: temporary)')
    args = parser.parse_args()

    print("🧪 Starting acceptance runs")
    print(f"📅 Date: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 60)

    config = load_run_config(args.config)
    if args.epochs is not None:
        config = with_overrides(config, training__fom__epochs=args.epochs, training__rom__epochs=args.epochs)
        config["training"]["fom"]["log_every"] = 0
        config["training"]["rom"]["log_every"] = 0
    seeds = list(range(args.seeds))
    out_dir = args.out or tempfile.mkdtemp(prefix="dispinn-acceptance-")

    results = {}
    if args.only in (None, 'mesh'):
        results['mesh'] = mesh_refinement(config)
    if args.only in (None, 'fom'):
        results['fom'] = fom_acceptance(config, seeds, os.path.join(out_dir, "fom"))
    if args.only in (None, 'rom'):
        results['rom'] = rom_acceptance(config, seeds, os.path.join(out_dir, "rom"))

    print("=" * 60)
    for name, passed in results.items():
        print(f"{'✅' if passed else '❌'} {name}")
    success = all(results.values())
    print("✅ All acceptance runs passed!" if success else "❌ Some acceptance runs failed!")
    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
