#!/usr/bin/env python3
"""
ソルバーデーモンのテスト
フレーム形式、エラー応答、ソケット越しの評価がプロセス内と一致すること
"""

import os
import socket
import sys
import tempfile
import threading
import unittest

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from dispinn_fom import FomTrainConfig, FomTrainer, TrainingAborted
from fv_core import TransportConfig, build_grid, initial_pulse, march
from nn_autodiff import init_mlp
from pod_rom import ReducedSystem
from solver_daemon import (HEADER, PROTOCOL_VERSION, ConnectionState, DaemonClient, DaemonError,
                           InProcessSolver, SolverDaemon, decode_array, encode_array, encode_frame,
                           fom_problem_document, open_solver, pack, parse_endpoint, read_frame,
                           rom_problem_document, unpack)


def fom_document():
    return fom_problem_document(build_grid(3, 3, 1.0, 1.0), TransportConfig(nu=0.01, dt=0.01))


def rom_document():
    rng = np.random.default_rng(0)
    system = ReducedSystem(M=np.eye(2), D=-np.eye(2), C=0.1 * rng.normal(size=(2, 2, 2)), nu=0.01,
                           B=rng.normal(size=(2, 1)), P=np.array([[1.0, 1.0]]))
    return rom_problem_document(system)


def trajectory():
    grid = build_grid(3, 3, 1.0, 1.0)
    u0 = initial_pulse(grid, 0.3, 0.7)
    fields = march(grid, TransportConfig(nu=0.01, dt=0.01), u0, 2)
    return np.stack([u0.flat()] + [f.flat() for f in fields])


class DroppingClient:
    """drop_after 回の評価の後で DaemonClient のソケットを閉じる"""

    def __init__(self, client, drop_after):
        self.client = client
        self.drop_after = drop_after
        self.calls = 0

    def _count(self):
        self.calls += 1
        if self.calls == self.drop_after:
            self.client.sock.close()

    def residual(self, U_prev, U_cur):
        R = self.client.residual(U_prev, U_cur)
        self._count()
        return R

    def jacobian(self, U_all, pairs, **kwargs):
        jac = self.client.jacobian(U_all, pairs, **kwargs)
        self._count()
        return jac


def training_config(**overrides):
    base = dict(epochs=3, k_int=2, lr=0.01, data_indices=[0], physics_indices=[1, 2], log_every=0)
    base.update(overrides)
    return FomTrainConfig(**base)


class TestCodec(unittest.TestCase):

    def test_arrays(self):
        values = np.arange(6.0).reshape(2, 3) / 7.0
        encoded = encode_array(values)
        self.assertEqual(encoded["dtype"], "<f8")
        self.assertEqual(encoded["shape"], [2, 3])
        np.testing.assert_array_equal(decode_array(encoded), values)
        self.assertEqual(decode_array(encode_array(np.array([1, 2]))).dtype, np.dtype("<i8"))

    def test_bad_arrays(self):
        with self.assertRaises(DaemonError) as ctx:
            decode_array({"dtype": "<f4", "shape": [1], "data": ""})
        self.assertEqual(ctx.exception.code, "bad_param")
        encoded = encode_array(np.ones(3))
        encoded["shape"] = [4]
        with self.assertRaises(DaemonError):
            decode_array(encoded)

    def test_nested_values(self):
        message = {"Q": np.ones((2, 2)), "rows": [np.zeros(1), 3], "nu": np.float64(0.01)}
        packed = pack(message)
        self.assertIsInstance(packed["nu"], float)
        again = unpack(packed)
        np.testing.assert_array_equal(again["Q"], np.ones((2, 2)))
        self.assertEqual(again["rows"][1], 3)

    def test_parse_endpoint(self):
        self.assertEqual(parse_endpoint("127.0.0.1:7878"), ("tcp", ("127.0.0.1", 7878)))
        self.assertEqual(parse_endpoint("daemon://localhost:9000"), ("tcp", ("localhost", 9000)))
        self.assertEqual(parse_endpoint("tcp://:9000"), ("tcp", ("127.0.0.1", 9000)))
        self.assertEqual(parse_endpoint("daemon://unix:/tmp/s.sock"), ("unix", "/tmp/s.sock"))
        self.assertEqual(parse_endpoint("/tmp/s.sock"), ("unix", "/tmp/s.sock"))
        with self.assertRaises(ValueError):
            parse_endpoint("localhost")


class TestFrames(unittest.TestCase):

    def setUp(self):
        self.a, self.b = socket.socketpair()

    def tearDown(self):
        self.a.close()
        self.b.close()

    def test_round_trip(self):
        self.a.sendall(encode_frame({"id": 1, "cmd": "hello"}))
        self.assertEqual(read_frame(self.b), {"id": 1, "cmd": "hello"})

    def test_header_is_body_length(self):
        frame = encode_frame({"id": 2})
        (length,) = HEADER.unpack(frame[:4])
        self.assertEqual(length, len(frame) - 4)

    def test_clean_close(self):
        self.a.close()
        self.assertIsNone(read_frame(self.b))

    def test_oversized_frame(self):
        self.a.sendall(HEADER.pack(1000))
        with self.assertRaises(DaemonError) as ctx:
            read_frame(self.b, max_frame_bytes=100)
        self.assertEqual(ctx.exception.code, "bad_frame")

    def test_closed_mid_frame(self):
        self.a.sendall(HEADER.pack(10) + b"{}")
        self.a.close()
        with self.assertRaises(DaemonError) as ctx:
            read_frame(self.b)
        self.assertEqual(ctx.exception.code, "bad_frame")

    def test_invalid_body(self):
        for body in (b"not json", b"[1, 2]"):
            with self.subTest(body=body):
                self.a.sendall(HEADER.pack(len(body)) + body)
                with self.assertRaises(DaemonError):
                    read_frame(self.b)


class TestHandleMessage(unittest.TestCase):

    def setUp(self):
        self.daemon = SolverDaemon()
        self.state = ConnectionState()

    def request(self, cmd, payload=None, request_id=1):
        return self.daemon.handle_message({"id": request_id, "cmd": cmd, "payload": pack(payload or {})},
                                          self.state)

    def test_evaluation_requires_hello(self):
        reply = self.request("residual", {"U_prev": np.zeros((1, 18)), "U_cur": np.zeros((1, 18))})
        self.assertFalse(reply["ok"])
        self.assertEqual(reply["error"]["code"], "not_ready")

    def test_unknown_command(self):
        reply = self.request("integrate", request_id=7)
        self.assertEqual(reply["id"], 7)
        self.assertEqual(reply["error"]["code"], "unknown_cmd")
        self.assertEqual(self.daemon.stats.errors["unknown_cmd"], 1)

    def test_protocol_version_checked(self):
        reply = self.request("hello", {"version": PROTOCOL_VERSION + 1})
        self.assertEqual(reply["error"]["code"], "bad_param")

    def test_bad_problem_document(self):
        reply = self.request("hello", {"problems": [{"kind": "fom", "grid": {"nx": 1}}]})
        self.assertEqual(reply["error"]["code"], "bad_param")

    def test_residual_after_hello(self):
        self.assertTrue(self.request("hello", {"problems": [fom_document()]})["ok"])
        U = trajectory()
        reply = self.request("residual", {"U_prev": U[:-1], "U_cur": U[1:]})
        self.assertTrue(reply["ok"])
        R = unpack(reply["result"])["R"]
        self.assertEqual(R.shape, (2, 18))
        self.assertLess(np.max(np.abs(R)), 1e-8)

    def test_missing_field_and_wrong_width(self):
        self.request("hello", {"problems": [fom_document()]})
        self.assertEqual(self.request("residual", {"U_prev": np.zeros((1, 18))})["error"]["code"], "bad_param")
        reply = self.request("residual", {"U_prev": np.zeros((1, 5)), "U_cur": np.zeros((1, 5))})
        self.assertEqual(reply["error"]["code"], "bad_param")

    def test_reduced_commands_need_reduced_system(self):
        self.request("hello", {"problems": [fom_document()]})
        reply = self.request("reduced_rhs", {"nu": 0.01, "Q": np.zeros((1, 3))})
        self.assertEqual(reply["error"]["code"], "not_ready")
        reply = self.request("reduced_jacobian", {"nu": -1.0, "Q": np.zeros((1, 3))})
        self.assertEqual(reply["error"]["code"], "not_ready")

    def test_shutdown(self):
        reply = self.request("shutdown")
        self.assertTrue(reply["ok"])
        self.assertTrue(self.daemon._stop.is_set())


class TestDaemonOverSocket(unittest.TestCase):

    def setUp(self):
        self.daemon = SolverDaemon("127.0.0.1:0")
        self.thread = threading.Thread(target=self.daemon.serve, daemon=True)
        self.thread.start()
        self.assertTrue(self.daemon.ready.wait(5))
        self.client = open_solver(self.daemon.endpoint_url, [fom_document(), rom_document()], timeout=10)
        self.local = open_solver("inproc", [fom_document(), rom_document()])

    def tearDown(self):
        self.client.close()
        self.daemon.stop()
        self.thread.join(5)

    def test_fom_commands_match_in_process(self):
        U = trajectory()
        np.testing.assert_array_equal(self.client.residual(U[:-1], U[1:]), self.local.residual(U[:-1], U[1:]))
        A_remote, b_remote = self.client.assemble(U[0])
        A_local, b_local = self.local.assemble(U[0])
        np.testing.assert_array_equal(A_remote.toarray(), A_local.toarray())
        np.testing.assert_array_equal(b_remote, b_local)
        pairs = [(0, 1), (1, 2)]
        remote = self.client.jacobian(U, pairs)
        local = self.local.jacobian(U, pairs)
        self.assertEqual(remote.pairs, local.pairs)
        np.testing.assert_array_equal(remote.to_sparse().toarray(), local.to_sparse().toarray())

    def test_reduced_commands_match_in_process(self):
        Q = np.random.default_rng(1).normal(size=(4, 3))
        X_remote, R2_remote = self.client.reduced_rhs(0.012, Q)
        X_local, R2_local = self.local.reduced_rhs(0.012, Q)
        np.testing.assert_array_equal(X_remote, X_local)
        np.testing.assert_array_equal(R2_remote, R2_local)
        np.testing.assert_array_equal(self.client.reduced_jacobian(0.012, Q, mode="analytic"),
                                      self.local.reduced_jacobian(0.012, Q, mode="analytic"))
        np.testing.assert_array_equal(self.client.pressure_operator(), [[1.0, 1.0]])

    def test_error_carries_request_id(self):
        with self.assertRaises(DaemonError) as ctx:
            self.client.reduced_rhs(0.01, np.zeros((1, 7)))
        self.assertEqual(ctx.exception.code, "bad_param")
        self.assertEqual(ctx.exception.request_id, self.client.request_id)
        # エラー後も同じ接続で続行できる
        self.assertEqual(self.client.reduced_rhs(0.01, np.zeros((1, 3)))[0].shape, (1, 2))

    def test_stats_count_requests(self):
        self.client.reduced_rhs(0.01, np.zeros((1, 3)))
        self.assertEqual(self.daemon.stats.requests["reduced_rhs"], 1)
        self.assertEqual(self.daemon.stats.requests["hello"], 1)
        self.assertEqual(self.daemon.stats.connections, 1)

    def test_shutdown_stops_server(self):
        self.client.shutdown()
        self.client.close()
        self.thread.join(5)
        self.assertFalse(self.thread.is_alive())

    def test_hello_is_per_connection(self):
        self.client.close()
        second = DaemonClient(self.daemon.endpoint_url, timeout=10)
        try:
            U = trajectory()
            with self.assertRaises(DaemonError) as ctx:
                second.residual(U[:-1], U[1:])
            self.assertEqual(ctx.exception.code, "not_ready")
            second.hello()
            np.testing.assert_array_equal(second.residual(U[:-1], U[1:]), self.local.residual(U[:-1], U[1:]))
        finally:
            second.close()
        self.assertEqual(self.daemon.stats.connections, 2)

    def test_training_epoch_matches_in_process(self):
        benchmark = trajectory()
        net = init_mlp([1, 6, benchmark.shape[1]], seed=4)
        remote_params, remote = FomTrainer(training_config(), self.client, 0.01).train(net, benchmark)
        local_params, local = FomTrainer(training_config(), self.local, 0.01).train(net, benchmark)
        self.assertEqual(len(remote), len(local))
        for a, b in zip(remote, local):
            self.assertEqual(a.epoch, b.epoch)
            for name in ("loss_data", "loss_eqn", "loss_dis", "loss_total"):
                self.assertAlmostEqual(getattr(a, name), getattr(b, name), delta=1e-12, msg=name)
        np.testing.assert_allclose(remote_params.flat(), local_params.flat(), rtol=0.0, atol=1e-12)

    def test_dropped_connection_aborts_training(self):
        benchmark = trajectory()
        net = init_mlp([1, 6, benchmark.shape[1]], seed=4)
        # 1 エポック目の残差の直後に切断 (ヤコビアン要求で失敗)
        solver = DroppingClient(self.client, drop_after=1)
        with self.assertRaises(TrainingAborted) as ctx:
            FomTrainer(training_config(), solver, 0.01).train(net, benchmark)
        self.assertEqual(ctx.exception.epoch, 0)
        self.assertEqual(ctx.exception.request_id, self.client.request_id)
        self.assertIsInstance(ctx.exception.__cause__, DaemonError)
        self.assertEqual(ctx.exception.__cause__.code, "connection")

    def test_dropped_connection_in_later_epoch(self):
        benchmark = trajectory()
        net = init_mlp([1, 6, benchmark.shape[1]], seed=4)
        # エポック 0 の残差とヤコビアンの後で切断
        solver = DroppingClient(self.client, drop_after=2)
        with self.assertRaises(TrainingAborted) as ctx:
            FomTrainer(training_config(), solver, 0.01).train(net, benchmark)
        self.assertEqual(ctx.exception.epoch, 1)


@unittest.skipUnless(hasattr(socket, "AF_UNIX"), "unix sockets not available")
class TestUnixSocket(unittest.TestCase):

    def test_hello_over_unix_socket(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "solver.sock")
            daemon = SolverDaemon(path)
            thread = threading.Thread(target=daemon.serve, daemon=True)
            thread.start()
            self.assertTrue(daemon.ready.wait(5))
            client = DaemonClient(daemon.endpoint_url)
            try:
                result = client.hello([fom_document()])
                self.assertTrue(result["fom"])
                self.assertFalse(result["rom"])
            finally:
                client.close()
                daemon.stop()
                thread.join(5)
            self.assertFalse(os.path.exists(path))


class TestOpenSolver(unittest.TestCase):

    def test_unknown_handle(self):
        with self.assertRaises(ValueError):
            open_solver("mpi://cluster")

    def test_connection_refused(self):
        spare = socket.socket()
        spare.bind(("127.0.0.1", 0))
        port = spare.getsockname()[1]
        spare.close()
        with self.assertRaises(DaemonError) as ctx:
            open_solver(f"daemon://127.0.0.1:{port}", timeout=2)
        self.assertEqual(ctx.exception.code, "connection")

    def test_in_process_hello(self):
        solver = InProcessSolver()
        result = solver.hello([rom_document()])
        self.assertEqual(result["version"], PROTOCOL_VERSION)
        self.assertFalse(result["fom"])
        np.testing.assert_array_equal(result["P"], [[1.0, 1.0]])
        self.assertEqual(len(result["problem"]), 16)


if __name__ == '__main__':
    unittest.main(verbosity=2)
