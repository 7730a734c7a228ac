#!/usr/bin/env python3
"""
POD と縮約モデルのテスト
小さなスナップショットの固有値、射影演算子の恒等式、縮約系の時間積分
"""

import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from fv_core import TransportConfig, build_grid, initial_pulse
from pod_rom import (PodBasis, ReducedState, ReducedSystem, RomIntegrationError, SnapshotSet,
                     collect_snapshots, convection_operator, diffusion_operator, divergence_operator,
                     gradient_operator, pod, project_operators, reduced_jacobian, reduced_residuals,
                     reduced_rhs, reduced_rhs_rows, rom_march)


def snapshot_set(grid, columns):
    Z = np.column_stack(columns)
    n = Z.shape[1]
    return SnapshotSet(Z=Z, times=np.arange(n, dtype=float), nus=np.full(n, 0.01), grid=grid)


def scalar_system(m=1.0, d=-1.0, c=0.0, nu=1.0):
    return ReducedSystem(M=[[m]], D=[[d]], C=[[[c]]], nu=nu)


class TestPod(unittest.TestCase):

    def setUp(self):
        self.grid = build_grid(2, 2, 1.0, 1.0)  # セル体積 0.25

    def test_single_snapshot_mode(self):
        u = np.arange(1.0, 9.0)
        basis = pod(snapshot_set(self.grid, [u]), 1)
        expected = u / np.sqrt(0.25 * u @ u)
        np.testing.assert_allclose(np.abs(basis.modes[:, 0]), expected, rtol=1e-12)
        np.testing.assert_allclose(basis.reconstruct(basis.project(u)), u, rtol=1e-12)

    def test_orthogonal_snapshots_eigenvalues(self):
        u1 = np.zeros(8)
        u1[0] = 4.0
        u2 = np.zeros(8)
        u2[1] = 2.0
        basis = pod(snapshot_set(self.grid, [u2, u1]), 2)
        np.testing.assert_allclose(basis.eigenvalues, [4.0, 1.0], rtol=1e-12)
        np.testing.assert_allclose(np.abs(basis.modes[:, 0]), np.abs(u1) / 2.0, atol=1e-12)

    def test_modes_are_weighted_orthonormal(self):
        grid = build_grid(4, 3, 2.0, 1.5)
        rng = np.random.default_rng(0)
        snaps = snapshot_set(grid, list(rng.normal(size=(6, 2 * grid.n_cells))))
        for method in ("jacobi", "lapack"):
            with self.subTest(method=method):
                basis = pod(snaps, 6, method=method)
                gram = basis.modes.T @ (basis.weights[:, None] * basis.modes)
                np.testing.assert_allclose(gram, np.eye(6), atol=1e-10)
                # 全モードならスナップショットを再現
                recon = basis.reconstruct(basis.project(snaps.Z))
                np.testing.assert_allclose(recon, snaps.Z, atol=1e-10)
                self.assertAlmostEqual(basis.energy_fraction()[-1], 1.0)
                self.assertEqual(basis.truncation_error(), 0.0)

    def test_truncation_error_of_leading_mode(self):
        basis = pod(snapshot_set(self.grid, [np.eye(8)[0] * 4.0, np.eye(8)[1] * 2.0]), 2)
        self.assertAlmostEqual(basis.truncation_error(1), 0.2)

    def test_mode_count_range(self):
        snaps = snapshot_set(self.grid, [np.ones(8), np.arange(8.0)])
        with self.assertRaises(ValueError):
            pod(snaps, 0)
        with self.assertRaises(ValueError):
            pod(snaps, 3)

    def test_zero_energy(self):
        with self.assertRaises(ValueError):
            pod(snapshot_set(self.grid, [np.zeros(8)]), 1)

    def test_rank_deficient_set_truncates_with_warning(self):
        u = np.arange(1.0, 9.0)
        with self.assertLogs('pod_rom', level='WARNING'):
            basis = pod(snapshot_set(self.grid, [u, 2.0 * u]), 2, method="lapack")
        self.assertEqual(basis.n_modes, 1)

    def test_document_round_trip(self):
        basis = pod(snapshot_set(self.grid, [np.arange(8.0), np.ones(8)]), 2)
        header, arrays = basis.to_document(self.grid)
        self.assertEqual(header["grid"]["nx"], 2)
        again = PodBasis.from_document(header, dict(arrays))
        np.testing.assert_array_equal(again.modes, basis.modes)
        np.testing.assert_array_equal(again.eigenvalues, basis.eigenvalues)
        with self.assertRaises(ValueError):
            PodBasis.from_document({"kind": "mlp"}, dict(arrays))


class TestSnapshots(unittest.TestCase):

    def test_row_count_checked(self):
        with self.assertRaises(ValueError):
            SnapshotSet(Z=np.ones((7, 1)), times=[0.0], nus=[0.01], grid=build_grid(2, 2, 1.0, 1.0))

    def test_metadata_per_column(self):
        with self.assertRaises(ValueError):
            SnapshotSet(Z=np.ones((8, 2)), times=[0.0], nus=[0.01, 0.01], grid=build_grid(2, 2, 1.0, 1.0))

    def test_collect_keeps_initial_field_and_every_kth(self):
        grid = build_grid(3, 3, 1.0, 1.0)
        cfg = TransportConfig(nu=0.01, dt=0.01)
        u0 = initial_pulse(grid, 0.3, 0.7)
        snaps = collect_snapshots(grid, cfg, u0, [0.01, 0.02], n_steps=4, every=2)
        self.assertEqual(snaps.n_snapshots, 6)
        np.testing.assert_allclose(snaps.times, [0.0, 0.02, 0.04] * 2)
        np.testing.assert_allclose(snaps.nus, [0.01] * 3 + [0.02] * 3)
        np.testing.assert_array_equal(snaps.Z[:, 0], u0.flat())
        np.testing.assert_array_equal(snaps.Z[:, 3], u0.flat())
        self.assertFalse(np.allclose(snaps.Z[:, 2], snaps.Z[:, 5]))


class TestOperators(unittest.TestCase):

    def setUp(self):
        self.grid = build_grid(3, 3, 3.0, 3.0)  # dx = 1

    def test_diffusion_of_constant(self):
        L = diffusion_operator(self.grid)
        out = L @ np.ones(2 * self.grid.n_cells)
        self.assertAlmostEqual(out[4], 0.0)
        self.assertAlmostEqual(out[0], -4.0)
        self.assertAlmostEqual(out[1], -2.0)

    def test_gradient_of_constant_pressure_vanishes(self):
        G = gradient_operator(self.grid)
        np.testing.assert_allclose(G @ np.full(self.grid.n_cells, 3.0), 0.0, atol=1e-12)

    def test_divergence_of_uniform_velocity_in_interior(self):
        div = divergence_operator(self.grid) @ np.ones(2 * self.grid.n_cells)
        self.assertAlmostEqual(div[4], 0.0)
        self.assertEqual(div.shape, (self.grid.n_cells,))

    def test_projected_mass_is_identity(self):
        rng = np.random.default_rng(1)
        snaps = snapshot_set(self.grid, list(rng.normal(size=(4, 2 * self.grid.n_cells))))
        basis = pod(snaps, 3)
        system = project_operators(self.grid, TransportConfig(nu=0.02), basis)
        np.testing.assert_allclose(system.M, np.eye(3), atol=1e-10)
        self.assertEqual(system.nu, 0.02)
        self.assertEqual(system.n_p, 0)

    def test_convection_tensor_matches_full_operator(self):
        rng = np.random.default_rng(2)
        snaps = snapshot_set(self.grid, list(rng.normal(size=(5, 2 * self.grid.n_cells))))
        basis = pod(snaps, 4)
        system = project_operators(self.grid, TransportConfig(), basis)
        a = rng.normal(size=4)
        u = basis.reconstruct(a)
        K = convection_operator(self.grid, u.reshape(2, -1))
        expected = basis.modes.T @ (K @ u)
        np.testing.assert_allclose(np.einsum("ijk,j,k->i", system.C, a, a), expected, atol=1e-10)

    def test_pressure_operators_shapes(self):
        rng = np.random.default_rng(3)
        basis_u = pod(snapshot_set(self.grid, list(rng.normal(size=(4, 2 * self.grid.n_cells)))), 3)
        p_snaps = SnapshotSet(Z=rng.normal(size=(self.grid.n_cells, 3)), times=[0.0, 1.0, 2.0],
                              nus=[0.01] * 3, grid=self.grid, n_components=1)
        basis_p = pod(p_snaps, 2)
        system = project_operators(self.grid, TransportConfig(), basis_u, basis_p)
        self.assertEqual(system.B.shape, (3, 2))
        self.assertEqual(system.P.shape, (2, 3))
        with self.assertRaises(ValueError):
            project_operators(self.grid, TransportConfig(), basis_p)


class TestReducedSystem(unittest.TestCase):

    def test_scalar_rhs(self):
        system = scalar_system(d=-1.0, c=0.25, nu=0.5)
        self.assertAlmostEqual(reduced_rhs(system, ReducedState(a=[2.0]))[0], -2.0)
        heavy = scalar_system(m=2.0, d=-1.0, c=0.25, nu=0.5)
        self.assertAlmostEqual(reduced_rhs(heavy, ReducedState(a=[2.0]))[0], -1.0)

    def test_rows_match_single_evaluation(self):
        rng = np.random.default_rng(4)
        system = ReducedSystem(M=np.eye(3), D=rng.normal(size=(3, 3)), C=rng.normal(size=(3, 3, 3)),
                               nu=0.01, B=rng.normal(size=(3, 2)), P=rng.normal(size=(2, 3)))
        a_rows = rng.normal(size=(4, 3))
        b_rows = rng.normal(size=(4, 2))
        rows = reduced_rhs_rows(system, a_rows, b_rows)
        for k in range(4):
            single = reduced_rhs(system, ReducedState(a=a_rows[k], b_p=b_rows[k]))
            np.testing.assert_allclose(rows[k], single, atol=1e-12)

    def test_continuity_residual(self):
        system = ReducedSystem(M=np.eye(2), D=np.zeros((2, 2)), C=np.zeros((2, 2, 2)), nu=0.0,
                               B=np.zeros((2, 1)), P=[[1.0, 1.0]])
        _, r2 = reduced_residuals(system, ReducedState(a=[1.0, -1.0], b_p=[0.0]), np.zeros(2))
        np.testing.assert_allclose(r2, [0.0])
        _, r2 = reduced_residuals(system, ReducedState(a=[1.0, 1.0], b_p=[0.0]), np.zeros(2))
        np.testing.assert_allclose(r2, [2.0])

    def test_momentum_residual(self):
        r1, r2 = reduced_residuals(scalar_system(), ReducedState(a=[2.0]), [1.0])
        np.testing.assert_allclose(r1, [3.0])
        self.assertEqual(r2.size, 0)

    def test_analytic_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        B = rng.normal(size=(3, 2))
        M = np.eye(3) + 0.1 * np.ones((3, 3))
        system = ReducedSystem(M=M, D=rng.normal(size=(3, 3)), C=rng.normal(size=(3, 3, 3)),
                               nu=0.3, B=B, P=rng.normal(size=(2, 3)))
        state = ReducedState(a=rng.normal(size=3), b_p=rng.normal(size=2))
        analytic = reduced_jacobian(system, state, mode="analytic")
        fd = reduced_jacobian(system, state, mode="finite_difference")
        self.assertEqual(analytic.shape, (3, 5))
        np.testing.assert_allclose(analytic, fd, atol=1e-7)
        with self.assertRaises(ValueError):
            reduced_jacobian(system, state, mode="complex_step")

    def test_validation(self):
        with self.assertRaises(ValueError):
            ReducedSystem(M=[[1.0, 1.0], [0.0, 1.0]], D=np.zeros((2, 2)), C=np.zeros((2, 2, 2)), nu=0.0)
        with self.assertRaises(ValueError):
            ReducedSystem(M=[[1.0, 0.0], [0.0, 0.0]], D=np.zeros((2, 2)), C=np.zeros((2, 2, 2)), nu=0.0)
        with self.assertRaises(ValueError):
            ReducedSystem(M=np.eye(2), D=np.zeros((2, 2)), C=np.zeros((2, 2, 2)), nu=0.0, P=np.ones((1, 3)))
        with self.assertRaises(ValueError):
            scalar_system().with_nu(-0.1)
        with self.assertRaises(ValueError):
            reduced_rhs(scalar_system(), ReducedState(a=[1.0, 2.0]))
        with self.assertRaises(ValueError):
            ReducedState(a=[np.nan])

    def test_document_round_trip(self):
        rng = np.random.default_rng(6)
        system = ReducedSystem(M=np.eye(2), D=rng.normal(size=(2, 2)), C=rng.normal(size=(2, 2, 2)),
                               nu=0.012, B=rng.normal(size=(2, 1)), P=rng.normal(size=(1, 2)))
        header, arrays = system.to_document()
        self.assertEqual((header["n_u"], header["n_p"]), (2, 1))
        again = ReducedSystem.from_document(header, dict(arrays))
        np.testing.assert_array_equal(again.C, system.C)
        np.testing.assert_array_equal(again.P, system.P)
        self.assertEqual(again.nu, 0.012)


class TestRomMarch(unittest.TestCase):

    def test_exponential_decay(self):
        dt, n_steps = 0.01, 100
        trajectory = rom_march(scalar_system(d=-1.0, nu=1.0), ReducedState(a=[1.0]), dt, n_steps)
        self.assertEqual(trajectory.shape, (101, 1))
        ratio = (1.0 - dt / 2) / (1.0 + dt / 2)
        np.testing.assert_allclose(trajectory[:, 0], ratio ** np.arange(101), rtol=1e-9)
        self.assertAlmostEqual(trajectory[-1, 0], np.exp(-1.0), delta=1e-4)

    def test_zero_rhs_is_constant(self):
        trajectory = rom_march(scalar_system(d=0.0), ReducedState(a=[0.7]), 0.1, 5)
        np.testing.assert_array_equal(trajectory[:, 0], np.full(6, 0.7))

    def test_non_convergence_reports_step(self):
        with self.assertRaises(RomIntegrationError) as ctx:
            rom_march(scalar_system(), ReducedState(a=[1.0]), 0.5, 3, tol=1e-16, max_iter=2)
        self.assertEqual(ctx.exception.step, 1)
        self.assertEqual(ctx.exception.iterations, 2)

    def test_invalid_arguments(self):
        with self.assertRaises(ValueError):
            rom_march(scalar_system(), ReducedState(a=[1.0]), 0.0, 3)
        with self.assertRaises(ValueError):
            rom_march(scalar_system(), ReducedState(a=[1.0]), 0.1, -1)


if __name__ == '__main__':
    unittest.main(verbosity=2)
