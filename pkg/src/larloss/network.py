"""Small convolutional regressor with a parallel embedding head.

Three stages of 3x3 same-padded convolution, 2x2 max pooling and ReLU,
then two linear heads on the flattened features: a ReLU scalar count
regressor and a D-dimensional embedding projection.  Forward and
backward passes are written out by hand on channel-major (C, B, H, W)
arrays.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatchError

CHECKPOINT_MAGIC = b"LARM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple[int, int, int] = (6, 32, 64)
    feature_maps: tuple[int, ...] = (32, 32, 32)
    kernel: int = 3
    embedding_dim: int = 16
    output_bias: float = 2.5

    def __post_init__(self):
        c, h, w = self.input_shape
        scale = 2 ** len(self.feature_maps)
        if h % scale or w % scale:
            raise ValueError(f"input {h}x{w} not divisible by {scale} for pooling")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd for same padding")

    @property
    def flat_features(self) -> int:
        _, h, w = self.input_shape
        scale = 2 ** len(self.feature_maps)
        return (h // scale) * (w // scale) * self.feature_maps[-1]


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    in_ch = config.input_shape[0]
    k = config.kernel
    for i, out_ch in enumerate(config.feature_maps):
        fan_in = in_ch * k * k
        params[f"conv{i}.w"] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(out_ch, k, k, in_ch))
        params[f"conv{i}.b"] = np.zeros(out_ch)
        in_ch = out_ch
    n_flat = config.flat_features
    # small head so initial predictions sit near the bias instead of below zero
    params["reg.w"] = rng.normal(scale=0.1 / np.sqrt(n_flat), size=(n_flat,))
    params["reg.b"] = np.array([config.output_bias])
    params["emb.w"] = rng.normal(scale=np.sqrt(1.0 / n_flat), size=(n_flat, config.embedding_dim))
    params["emb.b"] = np.zeros(config.embedding_dim)
    return {name: value.astype(dtype) for name, value in params.items()}


@dataclass
class Model:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    # standardisation of network inputs, fitted on the training split
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    @classmethod
    def create(cls, config: NetworkConfig, seed: int, dtype=np.float32) -> "Model":
        return cls(config, init_params(config, seed, dtype))

    @property
    def dtype(self):
        return self.params["reg.w"].dtype

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     None if self.input_mean is None else self.input_mean.copy(),
                     None if self.input_std is None else self.input_std.copy())

    def standardize(self, inputs: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return np.asarray(inputs, dtype=self.dtype)
        shape = (1, -1, 1, 1)
        out = (inputs - self.input_mean.reshape(shape)) / self.input_std.reshape(shape)
        return out.astype(self.dtype, copy=False)


@dataclass
class ForwardCache:
    layers: list = field(default_factory=list)
    flat: np.ndarray | None = None
    reg_pre: np.ndarray | None = None
    pooled_shape: tuple | None = None


def _conv_forward(x, w, b):
    """Same-padded stride-1 convolution on channel-major x (C,B,H,W), w (F,k,k,C).

    The padded input is flattened to (C, B*Hp*Wp) so every kernel offset is
    a contiguous column shift; outputs at padding positions are discarded.
    """
    c, bsz, h, wd = x.shape
    f, k = w.shape[0], w.shape[1]
    pad = k // 2
    hp, wp = h + 2 * pad, wd + 2 * pad
    m = bsz * hp * wp
    flat = np.zeros((c, m + (k - 1) * (wp + 1)), dtype=x.dtype)
    flat[:, :m].reshape(c, bsz, hp, wp)[:, :, pad:pad + h, pad:pad + wd] = x
    cols = np.empty((k * k * c, m), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            shift = di * wp + dj
            row = (di * k + dj) * c
            cols[row:row + c] = flat[:, shift:shift + m]
    out = w.reshape(f, -1) @ cols
    out += b[:, None]
    return out.reshape(f, bsz, hp, wp)[:, :, :h, :wd], cols


def _conv_backward(dout, cols, w, x_shape, need_dx=True):
    c, bsz, h, wd = x_shape
    f, k = w.shape[0], w.shape[1]
    pad = k // 2
    hp, wp = h + 2 * pad, wd + 2 * pad
    m = bsz * hp * wp
    dfull = np.zeros((f, bsz, hp, wp), dtype=dout.dtype)
    dfull[:, :, :h, :wd] = dout
    dfull = dfull.reshape(f, m)
    dw = (dfull @ cols.T).reshape(w.shape)
    db = dout.sum(axis=(1, 2, 3))
    if not need_dx:
        return None, dw, db
    dcols = w.reshape(f, -1).T @ dfull
    dflat = np.zeros((c, m + (k - 1) * (wp + 1)), dtype=dout.dtype)
    for di in range(k):
        for dj in range(k):
            shift = di * wp + dj
            row = (di * k + dj) * c
            dflat[:, shift:shift + m] += dcols[row:row + c]
    dx = dflat[:, :m].reshape(c, bsz, hp, wp)[:, :, pad:pad + h, pad:pad + wd]
    return dx, dw, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x):
    """2x2 max pooling over the last two axes; ties route to the first maximum."""
    quads = [x[:, :, i::2, j::2] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in quads:
        hit = (q == out) & ~taken
        taken |= hit
        masks.append(hit)
    return out, masks


def _pool_backward(dout, masks, x_shape):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for (i, j), hit in zip(_POOL_OFFSETS, masks):
        dx[:, :, i::2, j::2] = dout * hit
    return dx


def forward_pass(model: Model, inputs: np.ndarray, keep_cache: bool = False):
    """Run the network on standardised inputs of shape (B, C, H, W).

    Returns (raw embeddings, predictions, cache).  Predictions are the
    un-rounded ReLU outputs; embeddings are not yet normalised.
    """
    cfg = model.config
    if inputs.ndim != 4 or tuple(inputs.shape[1:]) != tuple(cfg.input_shape):
        raise ShapeMismatchError(
            f"expected inputs of shape (B, {', '.join(map(str, cfg.input_shape))}), got {inputs.shape}"
        )
    p = model.params
    x = np.ascontiguousarray(inputs.transpose(1, 0, 2, 3), dtype=model.dtype)
    cache = ForwardCache()
    for i in range(len(cfg.feature_maps)):
        conv, cols = _conv_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"])
        pooled, masks = _pool_forward(conv)
        if keep_cache:
            cache.layers.append((x.shape, cols, conv.shape, masks, pooled > 0))
        x = np.maximum(pooled, 0)
    # per-sample features in (C, h, w) order
    flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)
    reg_pre = flat @ p["reg.w"] + p["reg.b"][0]
    predictions = np.maximum(reg_pre, 0)
    embeddings = flat @ p["emb.w"] + p["emb.b"]
    if keep_cache:
        cache.flat = flat
        cache.reg_pre = reg_pre
        cache.pooled_shape = x.shape
    return embeddings, predictions, cache


def backward_pass(model: Model, cache: ForwardCache, d_predictions: np.ndarray,
                  d_embeddings: np.ndarray | None) -> dict[str, np.ndarray]:
    p = model.params
    dtype = model.dtype
    grads = {}
    d_reg = (np.asarray(d_predictions) * (cache.reg_pre > 0)).astype(dtype)
    grads["reg.w"] = cache.flat.T @ d_reg
    grads["reg.b"] = np.array([d_reg.sum()], dtype=dtype)
    d_flat = np.outer(d_reg, p["reg.w"])
    if d_embeddings is None:
        grads["emb.w"] = np.zeros_like(p["emb.w"])
        grads["emb.b"] = np.zeros_like(p["emb.b"])
    else:
        d_emb = np.asarray(d_embeddings, dtype=dtype)
        grads["emb.w"] = cache.flat.T @ d_emb
        grads["emb.b"] = d_emb.sum(axis=0)
        d_flat = d_flat + d_emb @ p["emb.w"].T
    c, bsz, h, w = cache.pooled_shape
    dx = np.ascontiguousarray(d_flat.reshape(bsz, c, h, w).transpose(1, 0, 2, 3))
    for i in reversed(range(len(cache.layers))):
        x_shape, cols, conv_shape, masks, active = cache.layers[i]
        d_conv = _pool_backward(dx * active, masks, conv_shape)
        dx, dw, db = _conv_backward(d_conv, cols, p[f"conv{i}.w"], x_shape, need_dx=i > 0)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return {name: grads[name] for name in p}


def save_checkpoint(model: Model, path: Path) -> bytes:
    """Write the LARM checkpoint and return its bytes.

    Layout (little-endian): magic "LARM", u32 version, u32 tensor count,
    then per tensor: u16 name length, UTF-8 name, u32 ndim, u32 dims,
    float32 row-major values.  Input standardisation statistics travel as
    the tensors "input.mean" and "input.std".
    """
    tensors = dict(model.params)
    if model.input_mean is not None:
        tensors["input.mean"] = model.input_mean
        tensors["input.std"] = model.input_std
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path: Path, config: NetworkConfig) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a LARM checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * size
    mean = tensors.pop("input.mean", None)
    std = tensors.pop("input.std", None)
    expected = init_params(config, 0)
    for name, value in expected.items():
        if name not in tensors or tensors[name].shape != value.shape:
            raise ShapeMismatchError(f"{path}: tensor {name} missing or wrong shape for {config}")
    return Model(config, {name: tensors[name] for name in expected}, mean, std)


def model_checksum(model: Model) -> str:
    h = hashlib.sha256()
    for name, value in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return h.hexdigest()
