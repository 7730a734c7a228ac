#!/usr/bin/env python3
"""
外部ソルバーデーモン

有限体積ソルバー (または縮約系) を別プロセスで動かし、残差とヤコビアンの
評価を長さ前置きフレームのプロトコルで提供する。

フレーム: 4 バイト little-endian の本文長 + UTF-8 JSON 本文
  要求: {"id": int, "cmd": str, "payload": {...}}
  応答: {"id": int, "ok": true, "result": {...}}
        {"id": int, "ok": false, "error": {"code": str, "message": str}}
配列: {"dtype": "<f8" | "<i8", "shape": [...], "data": base64}
"""
import base64
import hashlib
import json
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import csr_matrix

from fv_core import BlockJacobian, Grid, StepProblem, TransportConfig, jacobian as fv_jacobian
from pod_rom import ReducedState, ReducedSystem, reduced_jacobian, reduced_rhs_rows

PROTOCOL_VERSION = 1
DEFAULT_MAX_FRAME_BYTES = 64 * 1024 * 1024
DEFAULT_TIMEOUT = 30.0
HEADER = struct.Struct("<I")

COMMANDS = ("hello", "assemble", "residual", "jacobian", "reduced_rhs", "reduced_jacobian", "shutdown")
ERROR_CODES = ("bad_param", "unknown_cmd", "not_ready", "bad_frame", "internal")


class DaemonError(RuntimeError):
    """デーモンまたはクライアントのエラー (code と要求 ID 付き)"""

    def __init__(self, code: str, message: str, request_id: Optional[int] = None):
        super().__init__(f"[{code}] {message}" + (f" (request {request_id})" if request_id is not None else ""))
        self.code = code
        self.message = message
        self.request_id = request_id


# ---------------------------------------------------------------- codec

def encode_array(array: np.ndarray) -> Dict[str, Any]:
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.integer):
        data = np.ascontiguousarray(array, dtype="<i8")
        dtype = "<i8"
    else:
        data = np.ascontiguousarray(array, dtype="<f8")
        dtype = "<f8"
    return {"dtype": dtype, "shape": list(data.shape),
            "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(obj: Dict[str, Any]) -> np.ndarray:
    dtype = obj.get("dtype")
    if dtype not in ("<f8", "<i8"):
        raise DaemonError("bad_param", f"Unsupported array dtype: {dtype}")
    try:
        raw = base64.b64decode(obj["data"], validate=True)
        shape = tuple(int(n) for n in obj["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise DaemonError("bad_param", f"Malformed array: {e}")
    array = np.frombuffer(raw, dtype=dtype)
    if array.size != int(np.prod(shape)):
        raise DaemonError("bad_param", f"Array data has {array.size} values, shape {list(shape)}")
    return array.reshape(shape).copy()


def _is_array(obj: Any) -> bool:
    return isinstance(obj, dict) and set(obj) == {"dtype", "shape", "data"}


def pack(value: Any) -> Any:
    """ndarray を含む値を JSON 可能な形に変換"""
    if isinstance(value, np.ndarray):
        return encode_array(value)
    if isinstance(value, dict):
        return {k: pack(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [pack(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def unpack(value: Any) -> Any:
    if _is_array(value):
        return decode_array(value)
    if isinstance(value, dict):
        return {k: unpack(v) for k, v in value.items()}
    if isinstance(value, list):
        return [unpack(v) for v in value]
    return value


def encode_frame(message: Dict[str, Any]) -> bytes:
    body = json.dumps(message, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> Optional[Dict[str, Any]]:
    """
    1 フレームを読む

    Returns:
        メッセージ、接続が先頭で閉じられた場合は None

    Raises:
        DaemonError: bad_frame (途中切断、上限超過、不正な JSON)
    """
    header = _recv_exact(sock, HEADER.size)
    if header is None:
        return None
    (length,) = HEADER.unpack(header)
    if length > max_frame_bytes:
        raise DaemonError("bad_frame", f"Frame of {length} bytes exceeds limit {max_frame_bytes}")
    body = _recv_exact(sock, length)
    if body is None:
        raise DaemonError("bad_frame", "Connection closed mid-frame")
    try:
        message = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DaemonError("bad_frame", f"Invalid JSON body: {e}")
    if not isinstance(message, dict):
        raise DaemonError("bad_frame", "Frame body must be a JSON object")
    return message


def parse_endpoint(endpoint: str) -> Tuple[str, Union[Tuple[str, int], str]]:
    """"host:port"、"tcp://host:port"、"unix:///path" または "/path" を解釈"""
    if endpoint.startswith("daemon://"):
        endpoint = endpoint[len("daemon://"):]
    if endpoint.startswith("unix://"):
        return "unix", endpoint[len("unix://"):]
    if endpoint.startswith("unix:"):
        return "unix", endpoint[len("unix:"):]
    if endpoint.startswith("/"):
        return "unix", endpoint
    if endpoint.startswith("tcp://"):
        endpoint = endpoint[len("tcp://"):]
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Invalid endpoint: {endpoint}")
    return "tcp", (host or "127.0.0.1", int(port))


def _csr_to_payload(m: csr_matrix) -> Dict[str, Any]:
    return {"data": m.data, "indices": m.indices.astype(np.int64),
            "indptr": m.indptr.astype(np.int64), "shape": list(m.shape)}


def _csr_from_payload(obj: Dict[str, Any]) -> csr_matrix:
    return csr_matrix((obj["data"], obj["indices"], obj["indptr"]), shape=tuple(obj["shape"]))


def problem_hash(document: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(pack(document), sort_keys=True).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------- in-process solver

def fom_problem_document(grid: Grid, cfg: TransportConfig) -> Dict[str, Any]:
    return {"kind": "fom", "grid": grid.to_dict(), "transport": cfg.to_dict()}


def rom_problem_document(system: ReducedSystem) -> Dict[str, Any]:
    header, arrays = system.to_document()
    return {"kind": "rom", "header": header, "arrays": {name: arr for name, arr in arrays}}


class InProcessSolver:
    """デーモンと同じインターフェースを持つプロセス内ソルバー"""

    def __init__(self, problem: Optional[StepProblem] = None, reduced: Optional[ReducedSystem] = None):
        self.problem = problem
        self.reduced = reduced

    def load(self, document: Dict[str, Any]):
        """問題定義 (fom_problem_document / rom_problem_document 形式) を読み込む"""
        kind = document.get("kind")
        try:
            if kind == "fom":
                grid = Grid.from_dict(document["grid"])
                cfg = TransportConfig.from_dict(document["transport"])
                self.problem = StepProblem(grid, cfg)
            elif kind == "rom":
                self.reduced = ReducedSystem.from_document(document["header"], document["arrays"])
            else:
                raise DaemonError("bad_param", f"Unknown problem kind: {kind}")
        except (KeyError, TypeError, ValueError) as e:
            raise DaemonError("bad_param", f"Invalid {kind} problem: {e}")

    def problem_id(self) -> Optional[str]:
        docs = []
        if self.problem is not None:
            docs.append(fom_problem_document(self.problem.grid, self.problem.cfg))
        if self.reduced is not None:
            docs.append(rom_problem_document(self.reduced))
        return problem_hash({"problems": docs}) if docs else None

    def hello(self, problems: Optional[Sequence[Dict[str, Any]]] = None) -> Dict[str, Any]:
        for document in problems or []:
            self.load(document)
        result = {"version": PROTOCOL_VERSION, "problem": self.problem_id(),
                  "fom": self.problem is not None, "rom": self.reduced is not None}
        if self.reduced is not None and self.reduced.P is not None:
            result["P"] = self.reduced.P
        return result

    def _fom(self) -> StepProblem:
        if self.problem is None:
            raise DaemonError("not_ready", "No full-order problem loaded")
        return self.problem

    def _rom(self, nu: float) -> ReducedSystem:
        if self.reduced is None:
            raise DaemonError("not_ready", "No reduced system loaded")
        if not (np.isfinite(nu) and nu >= 0):
            raise DaemonError("bad_param", f"nu must be non-negative, got {nu}")
        return self.reduced.with_nu(float(nu))

    def _rows(self, U: np.ndarray, name: str) -> np.ndarray:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[1] != self._fom().n_dof:
            raise DaemonError("bad_param", f"{name} rows have {U.shape[1]} entries, expected {self._fom().n_dof}")
        if not np.all(np.isfinite(U)):
            raise DaemonError("bad_param", f"{name} contains non-finite values")
        return U

    def assemble(self, u_prev: np.ndarray) -> Tuple[csr_matrix, np.ndarray]:
        u_prev = self._rows(u_prev, "u_prev")[0]
        system = self._fom().build(u_prev)
        return system.A, system.b

    def residual(self, U_prev: np.ndarray, U_cur: np.ndarray) -> np.ndarray:
        U_prev = self._rows(U_prev, "U_prev")
        U_cur = self._rows(U_cur, "U_cur")
        if U_prev.shape != U_cur.shape:
            raise DaemonError("bad_param", "U_prev and U_cur must have the same number of rows")
        return self._fom().residual_rows(U_prev, U_cur)

    def jacobian(self, U_all: np.ndarray, pairs: Sequence[Tuple[int, int]], mode: str = "analytic",
                 fd_eps: float = 1e-6, include_previous: bool = True) -> BlockJacobian:
        U_all = self._rows(U_all, "U_all")
        if not fd_eps > 0:
            raise DaemonError("bad_param", f"fd_eps must be positive, got {fd_eps}")
        if mode not in ("analytic", "finite_difference"):
            raise DaemonError("bad_param", f"Unknown Jacobian mode: {mode}")
        n = U_all.shape[0]
        if any(not (0 <= p < n and 0 <= c < n) for p, c in pairs):
            raise DaemonError("bad_param", "Jacobian pair index out of range")
        return fv_jacobian(self._fom(), U_all, mode=mode, fd_eps=fd_eps, pairs=pairs,
                           include_previous=include_previous)

    def reduced_rhs(self, nu: float, Q_rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(X, R_red2) の行"""
        system = self._rom(nu)
        Q = np.atleast_2d(np.asarray(Q_rows, dtype=float))
        if Q.shape[1] != system.n_u + system.n_p:
            raise DaemonError("bad_param", f"Q rows have {Q.shape[1]} entries, expected {system.n_u + system.n_p}")
        a = Q[:, :system.n_u]
        b = Q[:, system.n_u:] if system.n_p else None
        X = reduced_rhs_rows(system, a, b)
        R2 = a @ system.P.T if system.P is not None else np.zeros((Q.shape[0], 0))
        return X, R2

    def reduced_jacobian(self, nu: float, Q_rows: np.ndarray, mode: str = "finite_difference",
                         fd_eps: float = 1e-6) -> np.ndarray:
        """行ごとの ∂X/∂Q (n_rows, n_u, n_u + n_p)"""
        system = self._rom(nu)
        if not fd_eps > 0:
            raise DaemonError("bad_param", f"fd_eps must be positive, got {fd_eps}")
        if mode not in ("analytic", "finite_difference"):
            raise DaemonError("bad_param", f"Unknown Jacobian mode: {mode}")
        Q = np.atleast_2d(np.asarray(Q_rows, dtype=float))
        if Q.shape[1] != system.n_u + system.n_p:
            raise DaemonError("bad_param", f"Q rows have {Q.shape[1]} entries, expected {system.n_u + system.n_p}")
        return np.stack([
            reduced_jacobian(system, ReducedState(a=q[:system.n_u], b_p=q[system.n_u:]), mode=mode, fd_eps=fd_eps)
            for q in Q
        ])

    def pressure_operator(self) -> np.ndarray:
        if self.reduced is None or self.reduced.P is None:
            raise DaemonError("not_ready", "No pressure operator loaded")
        return self.reduced.P

    def close(self):
        pass


# ---------------------------------------------------------------- daemon

@dataclass
class ConnectionState:
    """接続ごとの状態 (hello 済みかどうか)"""
    hello_done: bool = False


@dataclass
class SessionStats:
    started_at: float = field(default_factory=time.time)
    connections: int = 0
    requests: Dict[str, int] = field(default_factory=dict)
    errors: Dict[str, int] = field(default_factory=dict)
    last_request_id: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "uptime_seconds": round(time.time() - self.started_at, 3),
            "connections": self.connections,
            "requests": dict(self.requests),
            "errors": dict(self.errors),
            "last_request_id": self.last_request_id,
        }


class SolverDaemon:
    """1 クライアントずつ逐次処理するソルバーサーバー"""

    def __init__(self, endpoint: str = "127.0.0.1:0", solver: Optional[InProcessSolver] = None,
                 max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES, debug: bool = False):
        """
        Args:
            endpoint: "host:port" (port 0 で空きポート) または unix ソケットのパス
            solver: 事前に問題を読み込んだソルバー
            max_frame_bytes: 受信フレームの上限
            debug: デバッグログ
        """
        self.endpoint = endpoint
        self.solver = solver or InProcessSolver()
        self.max_frame_bytes = max_frame_bytes
        self.debug = debug
        self.logger = self._setup_logger()
        self.stats = SessionStats()
        self.ready = threading.Event()
        self.address: Optional[Union[Tuple[str, int], str]] = None
        self._stop = threading.Event()
        self._server: Optional[socket.socket] = None

    def _setup_logger(self) -> logging.Logger:
        logger = logging.getLogger(__name__)
        logger.setLevel(logging.DEBUG if self.debug else logging.INFO)

        if not logger.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
            handler.setFormatter(formatter)
            logger.addHandler(handler)

        return logger

    @property
    def endpoint_url(self) -> str:
        if isinstance(self.address, tuple):
            return f"daemon://{self.address[0]}:{self.address[1]}"
        return f"daemon://unix:{self.address}"

    def _bind(self) -> socket.socket:
        kind, address = parse_endpoint(self.endpoint)
        if kind == "unix":
            if os.path.exists(address):
                os.unlink(address)
            server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            server.bind(address)
            self.address = address
        else:
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            server.bind(address)
            self.address = server.getsockname()[:2]
        server.listen(1)
        server.settimeout(0.5)
        return server

    def serve(self):
        """shutdown コマンドまたは stop() まで要求を処理"""
        self._server = self._bind()
        self.logger.info(f"Solver daemon listening on {self.endpoint_url}")
        self.ready.set()
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._server.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                self.stats.connections += 1
                with conn:
                    self._handle_connection(conn)
        finally:
            self._server.close()
            if isinstance(self.address, str) and os.path.exists(self.address):
                os.unlink(self.address)
            self.logger.info("Solver daemon stopped")

    def stop(self):
        self._stop.set()

    def _handle_connection(self, conn: socket.socket):
        conn.settimeout(None)
        state = ConnectionState()
        while not self._stop.is_set():
            try:
                message = read_frame(conn, self.max_frame_bytes)
            except DaemonError as e:
                self.logger.warning(f"Closing connection: {e.message}")
                self._count_error(e.code)
                try:
                    conn.sendall(encode_frame({"id": None, "ok": False,
                                               "error": {"code": e.code, "message": e.message}}))
                except OSError:
                    pass
                return
            except OSError as e:
                self.logger.warning(f"Connection error: {e}")
                return
            if message is None:
                self.logger.debug("Client disconnected")
                return
            reply = self.handle_message(message, state)
            try:
                conn.sendall(encode_frame(reply))
            except OSError as e:
                self.logger.warning(f"Failed to send reply: {e}")
                return

    def _count_error(self, code: str):
        self.stats.errors[code] = self.stats.errors.get(code, 0) + 1

    def handle_message(self, message: Dict[str, Any],
                       state: Optional[ConnectionState] = None) -> Dict[str, Any]:
        """
        1 要求を処理して応答を返す (エラーは構造化された応答にする)

        Args:
            message: デコード済みの要求
            state: 送信元の接続の状態。省略時は新しい接続として扱う
        """
        state = state if state is not None else ConnectionState()
        request_id = message.get("id")
        cmd = message.get("cmd")
        self.stats.last_request_id = request_id
        self.stats.requests[str(cmd)] = self.stats.requests.get(str(cmd), 0) + 1
        try:
            if cmd not in COMMANDS:
                raise DaemonError("unknown_cmd", f"Unknown command: {cmd}")
            payload = unpack(message.get("payload") or {})
            if not isinstance(payload, dict):
                raise DaemonError("bad_param", "payload must be an object")
            result = self._dispatch(cmd, payload, state)
            return {"id": request_id, "ok": True, "result": pack(result)}
        except DaemonError as e:
            self._count_error(e.code)
            self.logger.debug(f"Request {request_id} ({cmd}) failed: {e.message}")
            return {"id": request_id, "ok": False, "error": {"code": e.code, "message": e.message}}
        except Exception as e:
            self._count_error("internal")
            self.logger.error(f"Request {request_id} ({cmd}) raised: {e}")
            return {"id": request_id, "ok": False, "error": {"code": "internal", "message": str(e)}}

    def _dispatch(self, cmd: str, payload: Dict[str, Any], state: ConnectionState) -> Dict[str, Any]:
        if cmd == "hello":
            version = payload.get("version", PROTOCOL_VERSION)
            if version != PROTOCOL_VERSION:
                raise DaemonError("bad_param", f"Unsupported protocol version: {version}")
            result = self.solver.hello(payload.get("problems"))
            state.hello_done = True
            return result
        if cmd == "shutdown":
            self.stop()
            return {"stopping": True}
        if not state.hello_done:
            raise DaemonError("not_ready", "hello is required before evaluation commands")

        try:
            if cmd == "assemble":
                A, b = self.solver.assemble(payload["u_prev"])
                return {"A": _csr_to_payload(A), "b": b}
            if cmd == "residual":
                return {"R": self.solver.residual(payload["U_prev"], payload["U_cur"])}
            if cmd == "jacobian":
                pairs = [tuple(int(v) for v in p) for p in np.asarray(payload["pairs"]).reshape(-1, 2)]
                jac = self.solver.jacobian(payload["U_all"], pairs, mode=payload.get("mode", "analytic"),
                                           fd_eps=float(payload.get("fd_eps", 1e-6)),
                                           include_previous=bool(payload.get("include_previous", True)))
                return {"pairs": np.array(jac.pairs, dtype=np.int64).reshape(-1, 2),
                        "n_instants": jac.n_instants, "n_dof": jac.n_dof,
                        "diag": [_csr_to_payload(m) for m in jac.diag_blocks],
                        "sub": [_csr_to_payload(m) for m in jac.sub_blocks]}
            if cmd == "reduced_rhs":
                X, R2 = self.solver.reduced_rhs(float(payload["nu"]), payload["Q"])
                return {"X": X, "R2": R2}
            if cmd == "reduced_jacobian":
                J = self.solver.reduced_jacobian(float(payload["nu"]), payload["Q"],
                                                 mode=payload.get("mode", "finite_difference"),
                                                 fd_eps=float(payload.get("fd_eps", 1e-6)))
                return {"J": J}
        except KeyError as e:
            raise DaemonError("bad_param", f"Missing payload field: {e}")
        raise DaemonError("unknown_cmd", f"Unknown command: {cmd}")


# ---------------------------------------------------------------- client

class DaemonClient:
    """SolverDaemon への接続 (InProcessSolver と同じインターフェース)"""

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT,
                 max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES):
        kind, address = parse_endpoint(endpoint)
        family = socket.AF_UNIX if kind == "unix" else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        try:
            self.sock.connect(address)
        except OSError as e:
            self.sock.close()
            raise DaemonError("connection", f"Cannot connect to {endpoint}: {e}")
        self.max_frame_bytes = max_frame_bytes
        self.request_id = 0
        self._pressure: Optional[np.ndarray] = None

    def client_eval(self, cmd: str, payload: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """要求を送り、デコード済みの結果を返す"""
        self.request_id += 1
        request_id = self.request_id
        try:
            self.sock.sendall(encode_frame({"id": request_id, "cmd": cmd, "payload": pack(payload or {})}))
            reply = read_frame(self.sock, self.max_frame_bytes)
        except socket.timeout:
            raise DaemonError("timeout", f"No reply to {cmd}", request_id)
        except DaemonError as e:
            raise DaemonError(e.code, e.message, request_id)
        except OSError as e:
            raise DaemonError("connection", f"Connection lost during {cmd}: {e}", request_id)
        if reply is None:
            raise DaemonError("connection", f"Connection closed during {cmd}", request_id)
        if reply.get("id") != request_id:
            raise DaemonError("bad_frame", f"Reply id {reply.get('id')} does not match", request_id)
        if not reply.get("ok"):
            error = reply.get("error") or {}
            raise DaemonError(error.get("code", "internal"), error.get("message", ""), request_id)
        return unpack(reply.get("result") or {})

    def hello(self, problems: Optional[Sequence[Dict[str, Any]]] = None) -> Dict[str, Any]:
        result = self.client_eval("hello", {"version": PROTOCOL_VERSION, "problems": list(problems or [])})
        if "P" in result:
            self._pressure = result["P"]
        return result

    def assemble(self, u_prev: np.ndarray) -> Tuple[csr_matrix, np.ndarray]:
        result = self.client_eval("assemble", {"u_prev": np.asarray(u_prev, dtype=float)})
        return _csr_from_payload(result["A"]), result["b"]

    def residual(self, U_prev: np.ndarray, U_cur: np.ndarray) -> np.ndarray:
        result = self.client_eval("residual", {"U_prev": np.atleast_2d(U_prev), "U_cur": np.atleast_2d(U_cur)})
        return result["R"]

    def jacobian(self, U_all: np.ndarray, pairs: Sequence[Tuple[int, int]], mode: str = "analytic",
                 fd_eps: float = 1e-6, include_previous: bool = True) -> BlockJacobian:
        result = self.client_eval("jacobian", {
            "U_all": np.atleast_2d(U_all), "pairs": np.array(pairs, dtype=np.int64).reshape(-1, 2),
            "mode": mode, "fd_eps": fd_eps, "include_previous": include_previous,
        })
        return BlockJacobian(
            pairs=tuple((int(p), int(c)) for p, c in result["pairs"]),
            diag_blocks=tuple(_csr_from_payload(m) for m in result["diag"]),
            sub_blocks=tuple(_csr_from_payload(m) for m in result["sub"]),
            n_instants=int(result["n_instants"]), n_dof=int(result["n_dof"]),
        )

    def reduced_rhs(self, nu: float, Q_rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        result = self.client_eval("reduced_rhs", {"nu": float(nu), "Q": np.atleast_2d(Q_rows)})
        return result["X"], result["R2"]

    def reduced_jacobian(self, nu: float, Q_rows: np.ndarray, mode: str = "finite_difference",
                         fd_eps: float = 1e-6) -> np.ndarray:
        result = self.client_eval("reduced_jacobian", {"nu": float(nu), "Q": np.atleast_2d(Q_rows),
                                                       "mode": mode, "fd_eps": fd_eps})
        return result["J"]

    def pressure_operator(self) -> np.ndarray:
        if self._pressure is None:
            raise DaemonError("not_ready", "No pressure operator loaded")
        return self._pressure

    def shutdown(self):
        self.client_eval("shutdown")

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def open_solver(handle: str = "inproc", problems: Optional[Sequence[Dict[str, Any]]] = None,
                timeout: float = DEFAULT_TIMEOUT):
    """
    ソルバーハンドルを開く

    Args:
        handle: "inproc" または "daemon://host:port" / "daemon://unix:/path"
        problems: hello で読み込ませる問題定義
    """
    if handle == "inproc":
        solver = InProcessSolver()
    elif handle.startswith("daemon://"):
        solver = DaemonClient(handle, timeout=timeout)
    else:
        raise ValueError(f"Unknown solver handle: {handle}")
    solver.hello(problems)
    return solver
