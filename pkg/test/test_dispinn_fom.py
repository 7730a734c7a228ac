#!/usr/bin/env python3
"""
全次元ソルバー結合学習のテスト
損失の手計算値、補正項の勾配恒等式、学習ループの制御
"""

import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from dispinn_fom import (FomTrainConfig, FomTrainer, TrainingAborted, loss_data, loss_data_cotangent,
                         loss_dis, loss_eqn, max_abs_errors, predict_fields, relative_l2_errors,
                         train_fom)
from fv_core import StepProblem, TransportConfig, build_grid, initial_pulse, jacobian, march
from nn_autodiff import AdamState, adam_step, backward_params, forward, init_mlp
from solver_daemon import InProcessSolver, fom_problem_document, open_solver


class CountingSolver:
    """InProcessSolver の呼び出し回数を記録"""

    def __init__(self, inner):
        self.inner = inner
        self.jacobian_calls = []

    def residual(self, U_prev, U_cur):
        return self.inner.residual(U_prev, U_cur)

    def jacobian(self, U_all, pairs, **kwargs):
        self.jacobian_calls.append(kwargs)
        return self.inner.jacobian(U_all, pairs, **kwargs)


class BrokenSolver:

    def residual(self, U_prev, U_cur):
        raise RuntimeError("solver went away")


def small_problem(n=4, dt=0.01, n_steps=5):
    grid = build_grid(n, n, 1.0, 1.0)
    cfg = TransportConfig(nu=0.01, dt=dt)
    u0 = initial_pulse(grid, 0.25, 0.75)
    benchmark = np.stack([u0.flat()] + [f.flat() for f in march(grid, cfg, u0, n_steps)])
    return grid, cfg, benchmark


class TestLosses(unittest.TestCase):

    def test_loss_data_hand_values(self):
        self.assertEqual(loss_data(np.ones((1, 2)), np.ones((1, 2)), [0]), 0.0)
        self.assertEqual(loss_data(np.array([[1.0, 1.0]]), np.zeros((1, 2)), [0]), 1.0)
        pred = np.array([[1.0, 0.0], [0.0, 2.0]])
        self.assertAlmostEqual(loss_data(pred, np.zeros((2, 2)), [0, 1]), 1.25)

    def test_loss_data_empty_index_set(self):
        with self.assertLogs('dispinn_fom', level='WARNING'):
            self.assertEqual(loss_data(np.ones((2, 2)), np.zeros((2, 2)), []), 0.0)

    def test_loss_eqn_entry_mean(self):
        self.assertAlmostEqual(loss_eqn(np.array([[1.0, 0.0], [0.0, 0.0]])), 0.25)

    def test_loss_eqn_of_solved_trajectory(self):
        grid, cfg, benchmark = small_problem()
        problem = StepProblem(grid, cfg)
        R = problem.residual_rows(benchmark[:-1], benchmark[1:])
        self.assertLess(loss_eqn(R), 1e-18)

    def test_zero_residual_gives_zero_cotangent(self):
        grid, cfg, benchmark = small_problem(n_steps=2)
        jac = jacobian(StepProblem(grid, cfg), benchmark)
        surrogate = loss_dis(np.zeros((2, benchmark.shape[1])), jac, benchmark)
        self.assertEqual(surrogate.value, 0.0)
        np.testing.assert_array_equal(surrogate.cotangent, np.zeros_like(benchmark))

    def test_missing_jacobian(self):
        with self.assertRaises(ValueError):
            loss_dis(np.ones((1, 4)), None, np.ones((2, 4)))


class TestGradientIdentity(unittest.TestCase):
    """新しいヤコビアンでは ∇θ L_Dis = ∇θ L_eqn"""

    def check_identity(self, include_previous):
        grid = build_grid(3, 3, 1.0, 1.0)
        problem = StepProblem(grid, TransportConfig(nu=0.05, dt=0.01))
        # 出力を正にずらして面流束の符号を固定
        net = init_mlp([1, 4, problem.n_dof], seed=2).with_normalization(output_shift=1.0,
                                                                          output_scale=0.3)
        times = np.array([[0.0], [0.5], [1.0]])
        pairs = [(0, 1), (1, 2)]

        def eqn_loss(p):
            U, _ = forward(p, times)
            if include_previous:
                R = problem.residual_rows(U[:2], U[1:])
            else:
                R = np.stack([problem.build(U_fixed[k]).A @ U[c] - problem.build(U_fixed[k]).b
                              for k, (_, c) in enumerate(pairs)])
            return loss_eqn(R)

        U, cache = forward(net, times)
        U_fixed = U[:2].copy()
        R = problem.residual_rows(U[:2], U[1:])
        jac = jacobian(problem, U, pairs=pairs, include_previous=include_previous)
        surrogate = loss_dis(R, jac, U, include_previous=include_previous)
        grad = backward_params(net, cache, surrogate.cotangent).flat()

        theta = net.flat()
        h = 1e-5
        expected = np.empty_like(theta)
        for k in range(theta.size):
            step = np.zeros_like(theta)
            step[k] = h
            expected[k] = (eqn_loss(net.with_flat(theta + step)) -
                           eqn_loss(net.with_flat(theta - step))) / (2 * h)
        scale = np.max(np.abs(expected))
        self.assertLessEqual(np.max(np.abs(grad - expected)), 1e-4 * scale)

    def test_corrected_gradient_matches_finite_differences(self):
        self.check_identity(include_previous=True)

    def test_uncorrected_gradient_treats_system_as_constant(self):
        self.check_identity(include_previous=False)


class TestReusedJacobian(unittest.TestCase):
    """k_int = 50 で使い回したヤコビアンでも補正勾配は L_eqn を下げる向き"""

    def test_reused_jacobian_still_descends(self):
        grid, transport, benchmark = small_problem(n=3)
        problem = StepProblem(grid, transport)
        cfg = FomTrainConfig(epochs=100, k_int=50, lr=0.006, data_indices=[0],
                             physics_indices=[1, 2, 3, 4, 5], log_every=0)
        trainer = FomTrainer(cfg, InProcessSolver(problem), transport.dt)
        steps = trainer.evaluation_steps()
        pairs = trainer.physics_pairs(steps)
        prev_rows = [p for p, _ in pairs]
        cur_rows = [c for _, c in pairs]
        times = (steps * transport.dt).reshape(-1, 1)
        params = trainer.normalize(init_mlp([1, 8, benchmark.shape[1]], seed=1), steps)
        state = AdamState.create(params, lr=cfg.lr)

        descending = []
        jac = None
        for epoch in range(cfg.epochs):
            U, cache = forward(params, times)
            R = problem.residual_rows(U[prev_rows], U[cur_rows])
            if epoch % cfg.k_int == 0:
                jac = jacobian(problem, U, pairs=pairs)
            reused = loss_dis(R, jac, U).cotangent
            fresh = loss_dis(R, jacobian(problem, U, pairs=pairs), U).cotangent
            g_reused = backward_params(params, cache, reused).flat()
            g_fresh = backward_params(params, cache, fresh).flat()
            descending.append(float(g_reused @ g_fresh) > 0.0)

            cot = reused + loss_data_cotangent(U, benchmark[steps], [0])
            params, state = adam_step(state, params, backward_params(params, cache, cot))

        self.assertTrue(descending[0] and descending[cfg.k_int])
        self.assertGreaterEqual(np.mean(descending), 0.95)


class TestMetrics(unittest.TestCase):

    def test_relative_l2(self):
        errors = relative_l2_errors(np.array([[3.0, 0.0]]), np.array([[3.0, 4.0]]))
        self.assertAlmostEqual(errors[0], 0.8)

    def test_zero_reference_falls_back_to_absolute(self):
        errors = relative_l2_errors(np.array([[3.0, 4.0]]), np.zeros((1, 2)))
        self.assertAlmostEqual(errors[0], 5.0)

    def test_max_abs(self):
        np.testing.assert_allclose(max_abs_errors(np.array([[1.0, -2.0]]), np.zeros((1, 2))), [2.0])
        with self.assertRaises(ValueError):
            max_abs_errors(np.zeros((1, 2)), np.zeros((2, 2)))


class TestFomTrainer(unittest.TestCase):

    def setUp(self):
        self.grid, self.transport, self.benchmark = small_problem()
        self.solver = open_solver("inproc", [fom_problem_document(self.grid, self.transport)])

    def config(self, **overrides):
        base = dict(epochs=10, k_int=4, lr=0.01, data_indices=[0], physics_indices=[1, 2, 3, 4, 5],
                    log_every=0)
        base.update(overrides)
        return FomTrainConfig(**base)

    def net(self, seed=0):
        return init_mlp([1, 8, self.benchmark.shape[1]], seed=seed)

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            FomTrainConfig(k_int=0)
        with self.assertRaises(ValueError):
            FomTrainConfig(physics_indices=[0, 10])
        with self.assertRaises(ValueError):
            FomTrainConfig(lambda_dis=-1.0)

    def test_evaluation_steps(self):
        trainer = FomTrainer(FomTrainConfig(physics_indices=[10, 20]), self.solver, 0.001)
        self.assertEqual(trainer.evaluation_steps().tolist(), [0, 9, 10, 19, 20])
        data_only = FomTrainer(FomTrainConfig(lambda_dis=0.0, data_indices=[0, 50]), self.solver, 0.001)
        self.assertEqual(data_only.evaluation_steps().tolist(), [0, 50])

    def test_reports_and_jacobian_refresh(self):
        solver = CountingSolver(self.solver)
        params, reports = FomTrainer(self.config(), solver, self.transport.dt).train(self.net(), self.benchmark)
        self.assertEqual([r.epoch for r in reports], list(range(10)))
        self.assertEqual(len(solver.jacobian_calls), 3)
        self.assertTrue(all(np.isfinite(r.loss_total) for r in reports))
        self.assertGreater(reports[0].loss_eqn, 0.0)
        self.assertEqual(params.output_dim, self.benchmark.shape[1])

    def test_uncorrected_variant_skips_previous_block(self):
        solver = CountingSolver(self.solver)
        FomTrainer(self.config(correction=False, epochs=2), solver, self.transport.dt).train(
            self.net(), self.benchmark)
        self.assertEqual(solver.jacobian_calls[0]["include_previous"], False)

    def test_data_only_training_reduces_data_loss(self):
        cfg = self.config(lambda_dis=0.0, data_indices=[0, 1, 2, 3, 4, 5], epochs=200)
        params, reports = train_fom(cfg, self.net(), self.benchmark, self.solver, self.transport.dt)
        self.assertLess(reports[-1].loss_data, 0.5 * reports[0].loss_data)
        self.assertTrue(all(r.loss_eqn == 0.0 for r in reports))

    def test_seeded_runs_are_identical(self):
        a = FomTrainer(self.config(), self.solver, self.transport.dt).train(self.net(3), self.benchmark)[1]
        b = FomTrainer(self.config(), self.solver, self.transport.dt).train(self.net(3), self.benchmark)[1]
        self.assertEqual([r.loss_total for r in a], [r.loss_total for r in b])

    def test_checkpoint_hook(self):
        seen = []
        cfg = self.config(checkpoint_every=5)
        FomTrainer(cfg, self.solver, self.transport.dt).train(
            self.net(), self.benchmark, checkpoint_hook=lambda epoch, p: seen.append(epoch))
        self.assertEqual(seen, [4, 9])

    def test_solver_failure_aborts_with_epoch(self):
        with self.assertRaises(TrainingAborted) as ctx:
            FomTrainer(self.config(), BrokenSolver(), self.transport.dt).train(self.net(), self.benchmark)
        self.assertEqual(ctx.exception.epoch, 0)

    def test_benchmark_must_cover_data(self):
        with self.assertRaises(ValueError):
            FomTrainer(self.config(data_indices=[10]), self.solver, self.transport.dt).train(
                self.net(), self.benchmark)

    def test_network_shape_checked(self):
        with self.assertRaises(ValueError):
            FomTrainer(self.config(), self.solver, self.transport.dt).train(
                init_mlp([2, 4, self.benchmark.shape[1]]), self.benchmark)

    def test_predict_fields_uses_raw_time(self):
        params, _ = FomTrainer(self.config(epochs=1), self.solver, self.transport.dt).train(
            self.net(), self.benchmark)
        times = np.arange(self.benchmark.shape[0]) * self.transport.dt
        self.assertEqual(predict_fields(params, times).shape, self.benchmark.shape)
        self.assertEqual(params.input_scale[0], 5 * self.transport.dt)


if __name__ == '__main__':
    unittest.main(verbosity=2)
