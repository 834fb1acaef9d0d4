"""Convolutional front end + transformer encoder classifier.

Shapes follow the ``[batch, 1, channels, time]`` convention of EEGNet: a
temporal convolution, a depthwise spatial convolution that collapses the
electrode axis, a separable convolution, then one token per pooled time
step (or group of ``patch_size`` steps) fed through post-norm encoder
blocks. The score head reads the classification token.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

WEIGHTS_MAGIC = b"EATW"
WEIGHTS_VERSION = 1

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# tiny so a fresh layer norm yields unit variance to ~1e-8
LN_EPS = 1e-9


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 10
    n_samples: int = 500
    sampling_rate: float = 250.0
    n_classes: int = 13
    temporal_filters: int = 8
    depth_multiplier: int = 2
    pointwise_filters: int = 16
    temporal_kernel_len: Optional[int] = None
    separable_kernel_len: int = 16
    pool1: int = 4
    pool2: int = 8
    d_model: int = 32
    n_heads: int = 2
    n_encoder_layers: int = 2
    ffn_dim: int = 64
    patch_size: int = 1
    dropout_p: float = 0.25
    encoder_dropout_p: float = 0.1
    use_positional_embeddings: bool = True

    def __post_init__(self):
        if self.temporal_kernel_len is None:
            object.__setattr__(self, "temporal_kernel_len", max(1, int(self.sampling_rate // 2)))
        self.validate()

    def validate(self) -> None:
        for name in ("n_channels", "n_samples", "temporal_filters", "depth_multiplier",
                     "pointwise_filters", "pool1", "pool2", "d_model", "n_heads",
                     "n_encoder_layers", "ffn_dim", "patch_size", "separable_kernel_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.temporal_kernel_len <= self.n_samples:
            raise ValueError(
                f"temporal_kernel_len {self.temporal_kernel_len} must lie in [1, n_samples={self.n_samples}]"
            )
        if self.pooled_len < 1:
            raise ValueError(f"pools {self.pool1}*{self.pool2} leave no time steps from {self.n_samples}")
        if self.pooled_len % self.patch_size:
            raise ValueError(
                f"patch_size {self.patch_size} does not divide pooled length {self.pooled_len}"
            )
        for name in ("dropout_p", "encoder_dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")

    @property
    def pooled_len(self) -> int:
        return (self.n_samples // self.pool1) // self.pool2

    @property
    def n_tokens(self) -> int:
        return self.pooled_len // self.patch_size

    @property
    def depthwise_filters(self) -> int:
        return self.temporal_filters * self.depth_multiplier

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Learnable parameter shapes, in serialization order."""
    F1, G, F2, d = cfg.temporal_filters, cfg.depthwise_filters, cfg.pointwise_filters, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "conv_temporal.w": (F1, cfg.temporal_kernel_len),
        "bn1.gamma": (F1,),
        "bn1.beta": (F1,),
        "conv_spatial.w": (G, cfg.n_channels),
        "bn2.gamma": (G,),
        "bn2.beta": (G,),
        "conv_separable.w": (G, cfg.separable_kernel_len),
        "conv_pointwise.w": (F2, G),
        "bn3.gamma": (F2,),
        "bn3.beta": (F2,),
        "tokens.w": (F2 * cfg.patch_size, d),
        "tokens.b": (d,),
        "cls": (d,),
    }
    if cfg.use_positional_embeddings:
        shapes["pos"] = (cfg.n_tokens + 1, d)
    for i in range(cfg.n_encoder_layers):
        p = f"enc{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"w_{proj}"] = (d, d)
            shapes[p + f"b_{proj}"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ffn1.w"] = (d, cfg.ffn_dim)
        shapes[p + "ffn1.b"] = (cfg.ffn_dim,)
        shapes[p + "ffn2.w"] = (cfg.ffn_dim, d)
        shapes[p + "ffn2.b"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Non-learned state: batch-norm running moments and input z-score stats."""
    F1, G, F2 = cfg.temporal_filters, cfg.depthwise_filters, cfg.pointwise_filters
    return {
        "bn1.running_mean": (F1,),
        "bn1.running_var": (F1,),
        "bn2.running_mean": (G,),
        "bn2.running_var": (G,),
        "bn3.running_mean": (F2,),
        "bn3.running_var": (F2,),
        "input.mean": (cfg.n_channels,),
        "input.std": (cfg.n_channels,),
    }


def _fans(name: str, shape: tuple[int, ...], cfg: ModelConfig) -> tuple[int, int]:
    if name == "conv_temporal.w":
        k = cfg.temporal_kernel_len
        return k, cfg.temporal_filters * k
    if name == "conv_spatial.w":
        return cfg.n_channels, cfg.depth_multiplier * cfg.n_channels
    if name == "conv_separable.w":
        k = cfg.separable_kernel_len
        return k, k
    if name == "conv_pointwise.w":
        return shape[1], shape[0]
    return shape[0], shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors.items()}
        out.update(self.buffers)
        return out


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, N(0, 0.02^2) CLS and positions,
    unit batch-norm/layer-norm scales."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("cls", "pos"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "gamma":
            value = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b"):
            value = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape, cfg)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(value, requires_grad=True)
    buffers = {}
    for name, shape in buffer_shapes(cfg).items():
        fill = 1.0 if name.endswith(("var", "std")) else 0.0
        buffers[name] = np.full(shape, fill)
    return ModelParams(cfg, tensors, buffers)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    # inverted dropout: scale kept units at train time
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def batch_norm(x: Tensor, params: ModelParams, prefix: str, training: bool) -> Tensor:
    """Per-feature normalization over (batch, height, time) of ``[B, F, H, W]``."""
    gamma = params[prefix + ".gamma"].reshape(1, -1, 1, 1)
    beta = params[prefix + ".beta"].reshape(1, -1, 1, 1)
    rm = params.buffers[prefix + ".running_mean"]
    rv = params.buffers[prefix + ".running_var"]
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        n = x.size // x.shape[1]
        rm *= 1 - BN_MOMENTUM
        rm += BN_MOMENTUM * mu.data.reshape(-1)
        rv *= 1 - BN_MOMENTUM
        rv += BN_MOMENTUM * var.data.reshape(-1) * n / max(n - 1, 1)
        xhat = xc / T.sqrt(var + BN_EPS)
    else:
        xhat = (x - rm.reshape(1, -1, 1, 1)) / np.sqrt(rv.reshape(1, -1, 1, 1) + BN_EPS)
    return xhat * gamma + beta


def avg_pool_time(x: Tensor, k: int) -> Tensor:
    """Non-overlapping average pool over the last axis; a ragged tail is dropped."""
    n = x.shape[-1] // k
    if n < 1:
        raise ShapeError(f"pool of {k} longer than time axis of {x.shape}")
    if n * k != x.shape[-1]:
        x = x[..., : n * k]
    return x.reshape(*x.shape[:-1], n, k).mean(axis=-1)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + LN_EPS) * gamma + beta


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def _check_input(batch: Tensor, cfg: ModelConfig) -> None:
    want = (1, cfg.n_channels, cfg.n_samples)
    if batch.ndim != 4 or batch.shape[1:] != want:
        raise ShapeError(f"expected input [B, {', '.join(map(str, want))}], got {batch.shape}")


def conv_feature_extractor(
    batch: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """``[B, 1, C, T] -> [B, F2, 1, T // pool1 // pool2]``."""
    batch = T.as_tensor(batch)
    _check_input(batch, cfg)
    B, C, n = batch.shape[0], cfg.n_channels, cfg.n_samples
    F1, D = cfg.temporal_filters, cfg.depth_multiplier

    k = cfg.temporal_kernel_len
    x = T.conv_time(batch.reshape(B, C, n), params["conv_temporal.w"], *_same_pad(k))
    x = x.transpose(0, 2, 1, 3)  # [B, C, F1, T] -> [B, F1, C, T]
    x = batch_norm(x, params, "bn1", training)

    # depthwise over electrodes: output filter f*D + j reads temporal filter f
    w_sp = params["conv_spatial.w"].reshape(F1, D, C)
    x = T.einsum("bfct,fdc->bfdt", x, w_sp).reshape(B, F1 * D, 1, n)
    x = batch_norm(x, params, "bn2", training)
    x = T.elu(x)
    x = avg_pool_time(x, cfg.pool1)
    x = dropout(x, cfg.dropout_p, training, rng)

    ks = cfg.separable_kernel_len
    t1 = x.shape[-1]
    win = T.sliding_windows(x.reshape(B, F1 * D, t1), ks, *_same_pad(ks))
    x = T.einsum("bgtk,gk->bgt", win, params["conv_separable.w"])
    x = T.einsum("bgt,hg->bht", x, params["conv_pointwise.w"]).reshape(B, cfg.pointwise_filters, 1, t1)
    x = batch_norm(x, params, "bn3", training)
    x = T.elu(x)
    x = avg_pool_time(x, cfg.pool2)
    x = dropout(x, cfg.dropout_p, training, rng)
    return x


def tokenize(features: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """``[B, F2, 1, T'] -> [B, N + 1, d_model]`` with the CLS token at index 0."""
    features = T.as_tensor(features)
    F2, P = cfg.pointwise_filters, cfg.patch_size
    if features.ndim != 4 or features.shape[1] != F2 or features.shape[2] != 1:
        raise ShapeError(f"expected features [B, {F2}, 1, T'], got {features.shape}")
    B, t = features.shape[0], features.shape[-1]
    if t % P:
        raise ShapeError(f"patch_size {P} does not divide feature length {t}")
    n = t // P
    patches = features.reshape(B, F2, n, P).transpose(0, 2, 1, 3).reshape(B, n, F2 * P)
    tokens = linear(patches, params["tokens.w"], params["tokens.b"])
    cls = T.broadcast_to(params["cls"].reshape(1, 1, cfg.d_model), (B, 1, cfg.d_model))
    x = T.concat([cls, tokens], axis=1)
    if cfg.use_positional_embeddings:
        if n + 1 != params["pos"].shape[0]:
            raise ShapeError(f"{n} patches but positional table holds {params['pos'].shape[0] - 1}")
        x = x + params["pos"]
    return x


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig):
    """Scaled dot-product attention over ``n_heads`` subspaces.

    Returns the projected output and the ``[B, h, S, S]`` attention weights.
    """
    x = T.as_tensor(x)
    d, h = cfg.d_model, cfg.n_heads
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"expected [B, S, {d}], got {x.shape}")
    B, S = x.shape[0], x.shape[1]
    dk = d // h

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, S, h, dk).transpose(0, 2, 1, 3)

    q = heads(linear(x, params[prefix + "w_q"], params[prefix + "b_q"]))
    k = heads(linear(x, params[prefix + "w_k"], params[prefix + "b_k"]))
    v = heads(linear(x, params[prefix + "w_v"], params[prefix + "b_v"]))
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, S, d)
    out = linear(out, params[prefix + "w_o"], params[prefix + "b_o"])
    return out, attn.data


def encoder_block(
    x: Tensor,
    params: ModelParams,
    index: int,
    cfg: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Post-norm block: ``LN(x + drop(MHA(x)))`` then ``LN(y + drop(FFN(y)))``."""
    p = f"enc{index}."
    attn_out, weights = multi_head_attention(x, params, p, cfg)
    y = layer_norm(x + dropout(attn_out, cfg.encoder_dropout_p, training, rng),
                   params[p + "ln1.gamma"], params[p + "ln1.beta"])
    hidden = T.elu(linear(y, params[p + "ffn1.w"], params[p + "ffn1.b"]))
    ffn = linear(hidden, params[p + "ffn2.w"], params[p + "ffn2.b"])
    z = layer_norm(y + dropout(ffn, cfg.encoder_dropout_p, training, rng),
                   params[p + "ln2.gamma"], params[p + "ln2.beta"])
    return z, weights


def classify_features(
    features: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Tokens -> encoder stack -> head on the CLS token."""
    x = tokenize(features, params, cfg)
    traces = []
    for i in range(cfg.n_encoder_layers):
        x, w = encoder_block(x, params, i, cfg, training, rng)
        traces.append(w)
    cls = x[:, 0, :]
    scores = linear(cls, params["head.w"], params["head.b"])
    return scores, traces


def model_forward(
    batch,
    params: ModelParams,
    cfg: Optional[ModelConfig] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
):
    """Scores ``[B, n_classes]`` and per-layer attention traces for ``[B, 1, C, T]``."""
    cfg = cfg or params.config
    features = conv_feature_extractor(batch, params, cfg, training, rng)
    return classify_features(features, params, cfg, training, rng)


def describe(cfg: ModelConfig) -> dict:
    """Parameter count and per-stage activation shapes (batch dim as ``B``)."""
    t1 = cfg.n_samples // cfg.pool1
    stages = [
        ("input", ["B", 1, cfg.n_channels, cfg.n_samples]),
        ("conv_temporal", ["B", cfg.temporal_filters, cfg.n_channels, cfg.n_samples]),
        ("conv_spatial", ["B", cfg.depthwise_filters, 1, cfg.n_samples]),
        ("pool1", ["B", cfg.depthwise_filters, 1, t1]),
        ("conv_separable", ["B", cfg.pointwise_filters, 1, t1]),
        ("pool2", ["B", cfg.pointwise_filters, 1, cfg.pooled_len]),
        ("tokens", ["B", cfg.n_tokens + 1, cfg.d_model]),
    ]
    stages += [(f"encoder{i}", ["B", cfg.n_tokens + 1, cfg.d_model]) for i in range(cfg.n_encoder_layers)]
    stages.append(("scores", ["B", cfg.n_classes]))
    shapes = param_shapes(cfg)
    return {
        "n_parameters": sum(math.prod(s) for s in shapes.values()),
        "n_buffers": sum(math.prod(s) for s in buffer_shapes(cfg).values()),
        "parameters": {k: list(v) for k, v in shapes.items()},
        "stages": [{"name": n, "shape": s} for n, s in stages],
    }


# weights file: magic, u16 version, u32 config-json length, config json,
# then every parameter and buffer as little-endian f64 in declared order
def save_params(params: ModelParams, path) -> None:
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HI", WEIGHTS_VERSION, len(cfg_json)))
    buf.write(cfg_json)
    for name in param_shapes(params.config):
        buf.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    for name in buffer_shapes(params.config):
        buf.write(np.ascontiguousarray(params.buffers[name], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file (magic {raw[:4]!r})")
    if len(raw) < 10:
        raise ValueError(f"{path}: truncated header")
    version, n = struct.unpack_from("<HI", raw, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    cfg = ModelConfig.from_dict(json.loads(raw[10 : 10 + n].decode()))
    offset = 10 + n
    shapes = param_shapes(cfg)
    bshapes = buffer_shapes(cfg)
    total = sum(math.prod(s) for s in shapes.values()) + sum(math.prod(s) for s in bshapes.values())
    if len(raw) - offset != 8 * total:
        raise ValueError(f"{path}: payload holds {len(raw) - offset} bytes, config needs {8 * total}")
    values = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    tensors, buffers, pos = {}, {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        tensors[name] = Tensor(values[pos : pos + size].reshape(shape).copy(), requires_grad=True)
        pos += size
    for name, shape in bshapes.items():
        size = math.prod(shape)
        buffers[name] = values[pos : pos + size].reshape(shape).copy()
        pos += size
    return ModelParams(cfg, tensors, buffers)
