"""Encoder-decoder transformer mapping fingerprint sequences to future positions.

Shapes: inputs are batched, ``(B, T_obs, input_dim)`` for the encoder and
``(B, k, 2)`` positions for the decoder. The decoder's output at token ``t``
is a displacement (in units of ``step_scale`` meters) added to that token's
input position, so token ``t`` predicts the position that follows it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import _io
from ..errors import ParameterError
from ..numcore import (
    Tensor, add, concat, dropout, embed_linear, layer_norm, matmul, relu, scale,
    softmax_rows, transpose,
)


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture and input-normalization settings.

    ``pe_width`` picks the positional-encoding denominator: ``"d_model"``
    (default) or ``"t_obs"`` for the window-length form.
    """

    d_model: int = 64
    h: int = 2
    N_e: int = 2
    N_d: int = 2
    d_ff: int = 256
    dropout_p: float = 0.01
    T_obs: int = 7
    horizon: int = 3
    input_dim: int = 32 * 64
    input_mode: str = "fingerprint"
    pe_width: str = "d_model"
    coord_center: tuple[float, float] = (0.0, 0.0)
    coord_scale: float = 1.0
    step_scale: float = 1.0

    def __post_init__(self):
        if min(self.d_model, self.h, self.N_e, self.N_d, self.d_ff, self.T_obs, self.horizon, self.input_dim) < 1:
            raise ParameterError("all counts in TransformerConfig must be >= 1")
        if self.d_model % self.h:
            raise ParameterError(f"d_model={self.d_model} is not divisible by h={self.h}")
        if self.input_mode not in ("fingerprint", "position"):
            raise ParameterError(f"unknown input_mode {self.input_mode!r}")
        if self.input_mode == "position" and self.input_dim != 2:
            raise ParameterError("position mode needs input_dim == 2")
        if self.pe_width not in ("d_model", "t_obs"):
            raise ParameterError(f"unknown pe_width {self.pe_width!r}")
        if not 0 <= self.dropout_p < 1:
            raise ParameterError("dropout_p must lie in [0, 1)")
        object.__setattr__(self, "coord_center", tuple(float(c) for c in self.coord_center))

    @property
    def d_head(self) -> int:
        return self.d_model // self.h

    @property
    def shared_embedding(self) -> bool:
        return self.input_dim == 2

    def digest(self) -> str:
        return _io.digest_of(asdict(self))


def positional_encoding(pos: int, j: int, width: int) -> float:
    """Sinusoid for token ``pos``, dimension ``j``: sine on even, cosine on odd ``j``.

    Both members of a pair share the exponent ``2 * (j - j % 2) / width``.
    """
    if not 0 <= j < width and width > 0:
        raise ParameterError("dimension index out of range")
    even = j - (j % 2)
    angle = pos / 10000.0 ** (2.0 * even / width)
    return math.sin(angle) if j % 2 == 0 else math.cos(angle)


def pe_table(n: int, d_model: int, width: int) -> np.ndarray:
    pos = np.arange(n, dtype=float)[:, None]
    j = np.arange(d_model)
    even = j - (j % 2)
    angle = pos / 10000.0 ** (2.0 * even / width)
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def _pe(config: TransformerConfig, n: int) -> np.ndarray:
    width = config.d_model if config.pe_width == "d_model" else config.T_obs
    return pe_table(n, config.d_model, width)


@dataclass
class ModelParams:
    """Named learnable tensors."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            missing = set(self.tensors) ^ set(arrays)
            raise ParameterError(f"checkpoint/model parameter names differ: {sorted(missing)[:5]}")
        for k, arr in arrays.items():
            if arr.shape != self.tensors[k].shape:
                raise ParameterError(f"{k}: shape {arr.shape} != {self.tensors[k].shape}")
            self.tensors[k].data = np.array(arr, dtype=np.float64)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _attention_names(prefix: str, h: int) -> list[str]:
    names = []
    for i in range(h):
        names += [f"{prefix}.q{i}", f"{prefix}.k{i}", f"{prefix}.v{i}"]
    return names + [f"{prefix}.o"]


def init_params(config: TransformerConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}

    def weight(name, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        t[name] = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), True, name)

    def vector(name, n, value=0.0):
        t[name] = Tensor(np.full(n, value), True, name)

    d, dh, dff = config.d_model, config.d_head, config.d_ff

    def attention_block(prefix):
        for i in range(config.h):
            for kind in "qkv":
                weight(f"{prefix}.{kind}{i}", d, dh)
        weight(f"{prefix}.o", config.h * dh, d)

    def norm(prefix):
        vector(f"{prefix}.g", d, 1.0)
        vector(f"{prefix}.b", d)

    def ffn(prefix):
        weight(f"{prefix}.w1", d, dff)
        vector(f"{prefix}.b1", dff)
        weight(f"{prefix}.w2", dff, d)
        vector(f"{prefix}.b2", d)

    weight("embed.in.w", config.input_dim, d)
    vector("embed.in.b", d)
    if not config.shared_embedding:
        weight("embed.out.w", 2, d)
        vector("embed.out.b", d)
    for l in range(config.N_e):
        attention_block(f"enc{l}.self")
        norm(f"enc{l}.ln1")
        ffn(f"enc{l}.ff")
        norm(f"enc{l}.ln2")
    for l in range(config.N_d):
        attention_block(f"dec{l}.self")
        norm(f"dec{l}.ln1")
        attention_block(f"dec{l}.cross")
        norm(f"dec{l}.ln2")
        ffn(f"dec{l}.ff")
        norm(f"dec{l}.ln3")
    weight("head.w", d, 2)
    vector("head.b", 2)
    return ModelParams(t)


def attention(Q, K, V, d: int, mask: np.ndarray | None = None) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    Q, K, V = (x if isinstance(x, Tensor) else Tensor(x) for x in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ParameterError(f"attention shapes Q{Q.shape} K{K.shape} V{V.shape} are incompatible")
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores, mask), V)


def multi_head(Q, K, V, params: ModelParams, prefix: str, h: int, mask: np.ndarray | None = None) -> Tensor:
    """Concatenate ``h`` projected attention heads and project with ``W^O``."""
    heads = []
    for i in range(h):
        wq, wk, wv = params[f"{prefix}.q{i}"], params[f"{prefix}.k{i}"], params[f"{prefix}.v{i}"]
        heads.append(attention(matmul(Q, wq), matmul(K, wk), matmul(V, wv), wq.shape[1], mask))
    return matmul(concat(heads, axis=-1) if h > 1 else heads[0], params[f"{prefix}.o"])


def _ffn(x, params, prefix):
    hidden = relu(embed_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return embed_linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _norm(x, params, prefix):
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _drop(x, config, train, rng):
    return dropout(x, config.dropout_p, rng, train)


def normalize_positions(pos, config: TransformerConfig) -> np.ndarray:
    return (np.asarray(pos, dtype=float) - np.asarray(config.coord_center)) / config.coord_scale


def encode(
    inputs,
    params: ModelParams,
    config: TransformerConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
    use_pe: bool = True,
) -> Tensor:
    """Latent sequence ``Z`` of shape ``(B, T_obs, d_model)``.

    ``inputs`` is ``(B, T_obs, input_dim)`` (fingerprints are flattened if
    given as ``(B, T_obs, M, N_s)``); in position mode it holds raw meters.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if config.input_mode == "position":
        x = normalize_positions(x, config)
    if x.ndim == 4:
        x = x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim != 3 or x.shape[1] != config.T_obs or x.shape[2] != config.input_dim:
        raise ParameterError(
            f"encoder input {x.shape} does not match (B, T_obs={config.T_obs}, {config.input_dim})"
        )
    tok = embed_linear(x, params["embed.in.w"], params["embed.in.b"])
    if use_pe:
        tok = add(tok, _pe(config, config.T_obs))
    z = _drop(tok, config, train, rng)
    for l in range(config.N_e):
        a = multi_head(z, z, z, params, f"enc{l}.self", config.h)
        z = _norm(add(z, _drop(a, config, train, rng)), params, f"enc{l}.ln1")
        f = _ffn(z, params, f"enc{l}.ff")
        z = _norm(add(z, _drop(f, config, train, rng)), params, f"enc{l}.ln2")
    return z


def causal_mask(k: int) -> np.ndarray:
    return np.tril(np.ones((k, k), dtype=bool))


def decode_step_outputs(
    Z: Tensor,
    dec_positions,
    params: ModelParams,
    config: TransformerConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the causally masked decoder over ``(B, k, 2)`` input positions.

    Returns ``(B, k, 2)`` predicted positions; output ``t`` depends only on
    inputs ``0..t``.
    """
    pos = np.asarray(dec_positions, dtype=np.float64)
    k = pos.shape[1]
    emb = ("embed.in" if config.shared_embedding else "embed.out")
    y = embed_linear(normalize_positions(pos, config), params[f"{emb}.w"], params[f"{emb}.b"])
    y = _drop(add(y, _pe(config, k)), config, train, rng)
    mask = causal_mask(k)
    for l in range(config.N_d):
        a = multi_head(y, y, y, params, f"dec{l}.self", config.h, mask)
        y = _norm(add(y, _drop(a, config, train, rng)), params, f"dec{l}.ln1")
        c = multi_head(y, Z, Z, params, f"dec{l}.cross", config.h)
        y = _norm(add(y, _drop(c, config, train, rng)), params, f"dec{l}.ln2")
        f = _ffn(y, params, f"dec{l}.ff")
        y = _norm(add(y, _drop(f, config, train, rng)), params, f"dec{l}.ln3")
    step = embed_linear(y, params["head.w"], params["head.b"])
    return add(scale(step, config.step_scale), pos)


def decode_autoregressive(
    Z: Tensor,
    params: ModelParams,
    config: TransformerConfig,
    start_token,
    horizon: int | None = None,
) -> np.ndarray:
    """Free-running decode: each new position is appended to the decoder input.

    ``start_token`` is the last observed position, ``(B, 2)`` or ``(2,)``.
    Returns ``(B, horizon, 2)`` (or ``(horizon, 2)`` for a single start).
    """
    horizon = config.horizon if horizon is None else horizon
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    start = np.asarray(start_token, dtype=np.float64)
    single = start.ndim == 1
    seq = start.reshape(-1, 1, 2)
    for _ in range(horizon):
        out = decode_step_outputs(Z, seq, params, config)
        seq = np.concatenate([seq, out.data[:, -1:, :]], axis=1)
    pred = seq[:, 1:, :]
    return pred[0] if single else pred
