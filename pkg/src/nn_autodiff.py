#!/usr/bin/env python3
"""
numpy による全結合ネットワーク

- 逆モード: パラメータ勾配 (backward_params)
- 順モード: 入力方向微分 (input_tangent)、ȧ = da/dt の計算に使う
- 接線グラフを通した逆モード (backward_joint)、ȧ を含む損失の勾配用
- Adam 更新

重みは (出力, 入力) の形で保持し、s = h W^T + c で行ごとに評価する。
入出力の正規化定数はモデルに含め、forward の内部で適用する。
"""
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


ACTIVATIONS = ("softplus", "tanh")


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _activation(name: str, s: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return softplus(s)
    return np.tanh(s)


def _activation_d1(name: str, s: np.ndarray) -> np.ndarray:
    if name == "softplus":
        return expit(s)
    t = np.tanh(s)
    return 1.0 - t * t


def _activation_d2(name: str, s: np.ndarray) -> np.ndarray:
    if name == "softplus":
        sig = expit(s)
        return sig * (1.0 - sig)
    t = np.tanh(s)
    return -2.0 * t * (1.0 - t * t)


@dataclass
class MlpParams:
    """ネットワークのパラメータ θ と正規化定数"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = "softplus"
    seed: Optional[int] = None
    input_shift: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    output_shift: Optional[np.ndarray] = None
    output_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation: {self.activation}")
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must be non-empty lists of equal length")
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(c, dtype=float).reshape(-1) for c in self.biases]
        for l, (w, c) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != c.shape[0]:
                raise ValueError(f"Layer {l + 1}: weight shape {w.shape} does not match bias {c.shape}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"Layer {l + 1}: input width {w.shape[1]} does not match previous output")
        n_in = self.weights[0].shape[1]
        n_out = self.weights[-1].shape[0]
        self.input_shift = _vector_or(self.input_shift, n_in, 0.0)
        self.input_scale = _vector_or(self.input_scale, n_in, 1.0)
        self.output_shift = _vector_or(self.output_shift, n_out, 0.0)
        self.output_scale = _vector_or(self.output_scale, n_out, 1.0)
        if np.any(self.input_scale == 0.0) or np.any(self.output_scale == 0.0):
            raise ValueError("Normalization scales must be non-zero")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + c.size for w, c in zip(self.weights, self.biases))

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for l, (w, c) in enumerate(zip(self.weights, self.biases), start=1):
            out.append((f"W{l}", w))
            out.append((f"c{l}", c))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    def with_flat(self, vector: np.ndarray) -> "MlpParams":
        """flat() と同じ並びのベクトルからパラメータを差し替えたコピー"""
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_parameters:
            raise ValueError(f"Expected {self.n_parameters} parameters, got {vector.size}")
        weights, biases = [], []
        pos = 0
        for w, c in zip(self.weights, self.biases):
            weights.append(vector[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vector[pos:pos + c.size].copy())
            pos += c.size
        return replace(self, weights=weights, biases=biases)

    def with_normalization(self, input_shift=None, input_scale=None,
                           output_shift=None, output_scale=None) -> "MlpParams":
        return replace(
            self,
            input_shift=self.input_shift if input_shift is None else input_shift,
            input_scale=self.input_scale if input_scale is None else input_scale,
            output_shift=self.output_shift if output_shift is None else output_shift,
            output_scale=self.output_scale if output_scale is None else output_scale,
        )

    def to_document(self) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
        """チェックポイント用のヘッダーと配列リスト"""
        header = {
            "kind": "mlp",
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "seed": self.seed,
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_shift": self.output_shift.tolist(),
            "output_scale": self.output_scale.tolist(),
        }
        return header, self.tensors()

    @classmethod
    def from_document(cls, header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> "MlpParams":
        if header.get("kind") != "mlp":
            raise ValueError(f"Not a network checkpoint: kind={header.get('kind')}")
        n_layers = len(header["layer_sizes"]) - 1
        return cls(
            weights=[arrays[f"W{l}"] for l in range(1, n_layers + 1)],
            biases=[arrays[f"c{l}"] for l in range(1, n_layers + 1)],
            activation=header["activation"],
            seed=header.get("seed"),
            input_shift=np.array(header["input_shift"]),
            input_scale=np.array(header["input_scale"]),
            output_shift=np.array(header["output_shift"]),
            output_scale=np.array(header["output_scale"]),
        )


def _vector_or(value, size: int, default: float) -> np.ndarray:
    if value is None:
        return np.full(size, default)
    value = np.asarray(value, dtype=float).reshape(-1)
    if value.size == 1:
        value = np.full(size, float(value[0]))
    if value.size != size:
        raise ValueError(f"Normalization vector has {value.size} entries, expected {size}")
    return value


@dataclass
class ParamGrad:
    """MlpParams と同じ形の勾配"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "ParamGrad":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(c) for c in params.biases])

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def scaled(self, factor: float) -> "ParamGrad":
        return ParamGrad([factor * w for w in self.weights], [factor * c for c in self.biases])

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for l, (w, c) in enumerate(zip(self.weights, self.biases), start=1):
            out.append((f"W{l}", w))
            out.append((f"c{l}", c))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])


@dataclass
class ForwardCache:
    params: MlpParams
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    input_tangents: Optional[List[np.ndarray]] = None
    pre_tangents: Optional[List[np.ndarray]] = None


@dataclass
class Batch:
    """入力行と、データ行・物理行のインデックス集合"""
    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    data_rows: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    eqn_rows: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.data_rows = np.asarray(self.data_rows, dtype=int).reshape(-1)
        self.eqn_rows = np.asarray(self.eqn_rows, dtype=int).reshape(-1)
        n = self.inputs.shape[0]
        for name, rows in (("data_rows", self.data_rows), ("eqn_rows", self.eqn_rows)):
            if rows.size and (rows.min() < 0 or rows.max() >= n):
                raise ValueError(f"{name} out of range for {n} input rows")
        if self.data_rows.size and self.targets is None:
            raise ValueError("targets are required when data_rows is not empty")
        if self.targets is not None:
            self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
            if self.targets.shape[0] != n:
                raise ValueError("targets must have one row per input row")


def init_mlp(layer_sizes: Sequence[int], activation: str = "softplus", seed: int = 0) -> MlpParams:
    """Glorot 一様分布で重みを初期化 (バイアスは 0)"""
    layer_sizes = [int(n) for n in layer_sizes]
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ValueError(f"Invalid layer sizes: {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights=weights, biases=biases, activation=activation, seed=seed)


def _check_inputs(params: MlpParams, z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != params.input_dim:
        raise ValueError(f"Input has {z.shape[1]} columns, network expects {params.input_dim}")
    return z


def forward(params: MlpParams, z: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """行ごとの出力と逆伝播用キャッシュ"""
    out, _, cache = _forward(params, z, None)
    return out, cache


def forward_with_tangent(params: MlpParams, z: np.ndarray,
                         direction: np.ndarray) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """出力、入力方向微分、接線を含むキャッシュ"""
    return _forward(params, z, direction)


def input_tangent(params: MlpParams, z: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """d(出力)/d(z) · direction"""
    _, tangent, _ = _forward(params, z, direction)
    return tangent


def _forward(params: MlpParams, z: np.ndarray, direction: Optional[np.ndarray]):
    z = _check_inputs(params, z)
    h = (z - params.input_shift) / params.input_scale
    layer_inputs, pre = [], []
    track = direction is not None
    if track:
        direction = np.asarray(direction, dtype=float).reshape(-1)
        if direction.size != params.input_dim:
            raise ValueError(f"Direction has {direction.size} entries, network expects {params.input_dim}")
        h_dot = np.broadcast_to(direction / params.input_scale, h.shape).copy()
        input_tangents, pre_tangents = [], []

    n_layers = len(params.weights)
    for l, (w, c) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        s = h @ w.T + c
        pre.append(s)
        if track:
            input_tangents.append(h_dot)
            s_dot = h_dot @ w.T
            pre_tangents.append(s_dot)
        if l < n_layers - 1:
            h = _activation(params.activation, s)
            if track:
                h_dot = _activation_d1(params.activation, s) * s_dot
        else:
            h = s
            if track:
                h_dot = s_dot

    out = h * params.output_scale + params.output_shift
    cache = ForwardCache(params=params, layer_inputs=layer_inputs, pre_activations=pre)
    tangent = None
    if track:
        tangent = h_dot * params.output_scale
        cache.input_tangents = input_tangents
        cache.pre_tangents = pre_tangents
    return out, tangent, cache


def backward_params(params: MlpParams, cache: ForwardCache, output_cotangent: np.ndarray) -> ParamGrad:
    """L = <output_cotangent, 出力> の θ 勾配"""
    return backward_joint(params, cache, output_cotangent, None)


def backward_joint(params: MlpParams, cache: ForwardCache, output_cotangent: Optional[np.ndarray],
                   tangent_cotangent: Optional[np.ndarray]) -> ParamGrad:
    """
    L = <output_cotangent, 出力> + <tangent_cotangent, 入力方向微分> の θ 勾配

    tangent_cotangent を使う場合は forward_with_tangent のキャッシュが必要。
    """
    if cache.params is not params:
        raise ValueError("Stale cache: forward was evaluated with different parameters")
    n_rows = cache.layer_inputs[0].shape[0]
    shape = (n_rows, params.output_dim)
    if output_cotangent is None:
        g = np.zeros(shape)
    else:
        g = np.broadcast_to(np.asarray(output_cotangent, dtype=float), shape) * params.output_scale
    g_dot = None
    if tangent_cotangent is not None:
        if cache.pre_tangents is None:
            raise ValueError("Tangent cotangent given but cache has no tangents")
        g_dot = np.broadcast_to(np.asarray(tangent_cotangent, dtype=float), shape) * params.output_scale

    n_layers = len(params.weights)
    grad_w: List[np.ndarray] = [None] * n_layers
    grad_c: List[np.ndarray] = [None] * n_layers
    for l in reversed(range(n_layers)):
        if l == n_layers - 1:
            adj_s, adj_s_dot = g, g_dot
        else:
            s = cache.pre_activations[l]
            d1 = _activation_d1(params.activation, s)
            adj_s = g * d1
            adj_s_dot = None
            if g_dot is not None:
                adj_s = adj_s + g_dot * cache.pre_tangents[l] * _activation_d2(params.activation, s)
                adj_s_dot = g_dot * d1
        grad_w[l] = adj_s.T @ cache.layer_inputs[l]
        if adj_s_dot is not None:
            grad_w[l] = grad_w[l] + adj_s_dot.T @ cache.input_tangents[l]
        grad_c[l] = adj_s.sum(axis=0)
        if l > 0:
            w = params.weights[l]
            g = adj_s @ w
            g_dot = adj_s_dot @ w if adj_s_dot is not None else None
    return ParamGrad(weights=grad_w, biases=grad_c)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: MlpParams, lr: float = 0.001, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if not lr > 0:
            raise ValueError(f"Learning rate must be positive, got {lr}")
        zeros = [np.zeros_like(t) for _, t in params.tensors()]
        return cls(m=zeros, v=[z.copy() for z in zeros], t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: MlpParams, grad: ParamGrad) -> Tuple[MlpParams, AdamState]:
    """
    Adam 1 ステップ (バイアス補正付き)

    Raises:
        ValueError: 勾配に非有限値が含まれる場合 (テンソル名を含む)
    """
    tensors = params.tensors()
    grads = grad.tensors()
    if len(tensors) != len(grads) or len(state.m) != len(tensors):
        raise ValueError("Gradient structure does not match parameters")
    for (name, p), (_, g) in zip(tensors, grads):
        if p.shape != g.shape:
            raise ValueError(f"Gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"Non-finite gradient in {name}")

    t = state.t + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    new_m, new_v, updated = [], [], []
    for (_, p), (_, g), m, v in zip(tensors, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        updated.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)

    new_params = replace(params, weights=updated[0::2], biases=updated[1::2])
    new_state = replace(state, m=new_m, v=new_v, t=t)
    return new_params, new_state
