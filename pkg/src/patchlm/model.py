"""Decoder-only transformer shared by text tokens and time-series patches.

One sequence mixes the two modalities position by position: text enters
through a tied embedding table, patches through a bias-free projection of
the 4P feature vector followed by RMSNorm.  Blocks are pre-norm RMSNorm
with grouped-query causal attention (RoPE, per-head QK RMSNorm) and a
SwiGLU MLP.  Attention output projections, SwiGLU w3, and the quantile
head start at zero so the whole stack is the identity on the residual
stream at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import CacheError, ConfigError, DataError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    patch_len: int = 8
    n_quantiles: int = 21
    vocab_size: int = 4096
    rope_base: float = 5.0e5
    softcap_alpha: float = 15.0
    max_seq: int = 256
    tied_lm_head: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError("n_q_heads must be divisible by n_kv_heads")
        if self.head_dim * self.n_q_heads != self.d_model:
            raise ConfigError("head_dim * n_q_heads must equal d_model")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.n_quantiles % 2 == 0:
            raise ConfigError("n_quantiles must be odd so the median level exists")

    @property
    def swiglu_hidden(self) -> int:
        raw = math.ceil(8 * self.d_model / 3)
        return ((raw + 255) // 256) * 256


@dataclass
class SequenceLayout:
    """Per-position modality assignment for one sequence.

    Every position is exactly one of text (token id) or ts (patch feature
    row); indices must partition range(length).
    """

    length: int
    text_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    text_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ts_pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ts_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))

    def __post_init__(self):
        self.text_pos = np.asarray(self.text_pos, dtype=np.int64)
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        self.ts_pos = np.asarray(self.ts_pos, dtype=np.int64)
        if self.text_pos.shape != self.text_ids.shape:
            raise DataError("text_pos and text_ids must align")
        if len(self.ts_pos) != len(self.ts_features):
            raise DataError("ts_pos and ts_features must align")
        merged = np.concatenate([self.text_pos, self.ts_pos])
        if sorted(merged.tolist()) != list(range(self.length)):
            raise DataError("positions must cover 0..length-1 exactly once")


def text_only_layout(ids: np.ndarray) -> SequenceLayout:
    ids = np.asarray(ids, dtype=np.int64)
    return SequenceLayout(length=len(ids), text_pos=np.arange(len(ids)), text_ids=ids)


def ts_only_layout(features: np.ndarray) -> SequenceLayout:
    features = np.asarray(features, dtype=np.float32)
    return SequenceLayout(length=len(features), ts_pos=np.arange(len(features)),
                          ts_features=features)


# ---------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------

def _fan_scaled(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    sigma = min(1.0, math.sqrt(fan_out / fan_in)) / math.sqrt(fan_in)
    return rng.normal(0.0, sigma, size=(fan_in, fan_out)).astype(dtype)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.d_model
    hd = config.head_dim
    hidden = config.swiglu_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "patch_proj": (4 * config.patch_len, d),
        "patch_norm": (d,),
        "post_emb_norm": (d,),
        "final_norm": (d,),
        "qhead_norm": (d,),
        "quantile_head": (d, config.patch_len * config.n_quantiles),
    }
    if not config.tied_lm_head:
        shapes["lm_head"] = (d, config.vocab_size)
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, config.n_q_heads * hd)
        shapes[p + "wk"] = (d, config.n_kv_heads * hd)
        shapes[p + "wv"] = (d, config.n_kv_heads * hd)
        shapes[p + "wo"] = (config.n_q_heads * hd, d)
        shapes[p + "q_norm"] = (hd,)
        shapes[p + "k_norm"] = (hd,)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w1"] = (d, hidden)
        shapes[p + "w2"] = (d, hidden)
        shapes[p + "w3"] = (hidden, d)
    return shapes


ZERO_INIT_SUFFIXES = ("wo", "w3", "quantile_head", "lm_head")


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ZERO_INIT_SUFFIXES:
            arr = np.zeros(shape, dtype=dtype)
        elif len(shape) == 1:
            arr = np.ones(shape, dtype=dtype)  # every norm scale
        elif name == "tok_emb":
            arr = rng.normal(0.0, 0.02, size=shape).astype(dtype)
        else:
            arr = _fan_scaled(rng, shape[0], shape[1], dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return params


# ---------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------

def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2 != 0:
        raise ConfigError("head_dim must be even for rotary embeddings")
    j = np.arange(head_dim // 2, dtype=np.float64)
    freqs = base ** (-2.0 * j / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate [B, H, S, hd] per-pair by position-dependent angles."""
    hd = x.shape[-1]
    cos, sin = rope_tables(positions, hd, base, x.data.dtype)
    cos = cos[None, None, :, :]
    sin = sin[None, None, :, :]
    half = hd // 2
    x1 = T.index(x, (Ellipsis, slice(0, half)))
    x2 = T.index(x, (Ellipsis, slice(half, hd)))
    out1 = T.sub(T.mul_const(x1, cos), T.mul_const(x2, sin))
    out2 = T.add(T.mul_const(x1, sin), T.mul_const(x2, cos))
    return T.concat([out1, out2], axis=-1)


def soft_cap(logits: Tensor, alpha: float) -> Tensor:
    """alpha * tanh(logits / alpha): bounded in (-alpha, alpha), monotone."""
    return T.mul_const(T.tanh(T.mul_const(logits, 1.0 / alpha)), alpha)


# ---------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------

class KVCache:
    """Per-layer K/V buffers for incremental decoding (inference only)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.length = 0
        self._k: list[Optional[np.ndarray]] = [None] * config.n_layers
        self._v: list[Optional[np.ndarray]] = [None] * config.n_layers

    def extend(self, layer: int, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        held = 0 if self._k[layer] is None else self._k[layer].shape[2]
        if held != self.length:
            raise CacheError(f"layer {layer} cache out of sync ({held} != {self.length})")
        if self._k[layer] is None:
            self._k[layer], self._v[layer] = k_new, v_new
        else:
            self._k[layer] = np.concatenate([self._k[layer], k_new], axis=2)
            self._v[layer] = np.concatenate([self._v[layer], v_new], axis=2)
        return self._k[layer], self._v[layer]

    def advance(self, n_new: int) -> None:
        if n_new <= 0:
            raise CacheError("cache position must advance")
        self.length += n_new
        if self.length > self.config.max_seq:
            raise CacheError(f"cache exceeded max_seq {self.config.max_seq}")


# ---------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------

def embed_sequence(params: dict[str, Tensor], config: ModelConfig,
                   layouts: list[SequenceLayout]) -> Tensor:
    """Token lookup + normalized patch projection, merged per position."""
    if not layouts:
        raise DataError("need at least one sequence")
    S = layouts[0].length
    if any(l.length != S for l in layouts):
        raise DataError("all sequences in a batch must share one length")
    B = len(layouts)
    n = B * S
    d = config.d_model

    text_pos = np.concatenate([b * S + l.text_pos for b, l in enumerate(layouts)])
    text_ids = np.concatenate([l.text_ids for l in layouts])
    ts_pos = np.concatenate([b * S + l.ts_pos for b, l in enumerate(layouts)])
    ts_feats = (np.concatenate([l.ts_features for l in layouts], axis=0)
                if any(len(l.ts_pos) for l in layouts)
                else np.zeros((0, 4 * config.patch_len), dtype=np.float32))

    pieces = []
    if len(text_pos):
        if text_ids.size and text_ids.max() >= config.vocab_size:
            raise DataError(f"token id {int(text_ids.max())} >= vocab_size {config.vocab_size}")
        tok = T.gather_rows(params["tok_emb"], text_ids)
        pieces.append(T.scatter_rows(n, text_pos, tok))
    if len(ts_pos):
        if ts_feats.shape[1] != 4 * config.patch_len:
            raise DimensionError(f"patch features must be 4P={4 * config.patch_len} wide")
        feats = Tensor(ts_feats.astype(params["patch_proj"].data.dtype))
        proj = T.matmul(feats, params["patch_proj"])
        proj = T.rmsnorm(proj, params["patch_norm"], config.norm_eps)
        pieces.append(T.scatter_rows(n, ts_pos, proj))
    if not pieces:
        raise DataError("empty layout")
    flat = pieces[0] if len(pieces) == 1 else T.add(pieces[0], pieces[1])
    hidden = T.reshape(flat, (B, S, d))
    return T.rmsnorm(hidden, params["post_emb_norm"], config.norm_eps)


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    B, S, _ = x.shape
    return T.transpose(T.reshape(x, (B, S, n_heads, head_dim)), (0, 2, 1, 3))


def attention_gqa(params: dict[str, Tensor], config: ModelConfig, layer: int,
                  x: Tensor, cache: Optional[KVCache] = None) -> Tensor:
    p = f"blocks.{layer}."
    B, S, d = x.shape
    hd = config.head_dim
    off = cache.length if cache is not None else 0
    positions = np.arange(off, off + S)
    if off + S > config.max_seq:
        raise ConfigError(f"sequence length {off + S} exceeds max_seq {config.max_seq}")

    flat = T.reshape(x, (B * S, d))
    q = _split_heads(T.reshape(T.matmul(flat, params[p + "wq"]), (B, S, -1)),
                     config.n_q_heads, hd)
    k = _split_heads(T.reshape(T.matmul(flat, params[p + "wk"]), (B, S, -1)),
                     config.n_kv_heads, hd)
    v = _split_heads(T.reshape(T.matmul(flat, params[p + "wv"]), (B, S, -1)),
                     config.n_kv_heads, hd)

    q = rope_apply(T.rmsnorm(q, params[p + "q_norm"], config.norm_eps), positions, config.rope_base)
    k = rope_apply(T.rmsnorm(k, params[p + "k_norm"], config.norm_eps), positions, config.rope_base)

    if cache is not None:
        if T.grad_enabled() and (x.requires_grad or x._rules):
            raise CacheError("KV cache is inference-only; wrap generation in no_grad()")
        k_full, v_full = cache.extend(layer, k.data, v.data)
        k, v = Tensor(k_full), Tensor(v_full)
    total = k.shape[2]

    group = config.n_q_heads // config.n_kv_heads
    k_exp = T.repeat_axis(k, group, axis=1)
    v_exp = T.repeat_axis(v, group, axis=1)

    scores = T.mul_const(T.matmul(q, T.transpose(k_exp, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    keep = (np.arange(total)[None, :] <= (off + np.arange(S))[:, None])
    att = T.softmax(T.masked_fill(scores, keep[None, None, :, :], -np.inf))
    ctx = T.matmul(att, v_exp)                                   # [B, Hq, S, hd]
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B * S, config.n_q_heads * hd))
    return T.reshape(T.matmul(merged, params[p + "wo"]), (B, S, d))


def block_forward(params: dict[str, Tensor], config: ModelConfig, layer: int,
                  hidden: Tensor, cache: Optional[KVCache] = None) -> Tensor:
    p = f"blocks.{layer}."
    attn_in = T.rmsnorm(hidden, params[p + "attn_norm"], config.norm_eps)
    hidden = T.add(hidden, attention_gqa(params, config, layer, attn_in, cache))
    mlp_in = T.rmsnorm(hidden, params[p + "mlp_norm"], config.norm_eps)
    B, S, d = mlp_in.shape
    flat = T.reshape(mlp_in, (B * S, d))
    gate = T.silu(T.matmul(flat, params[p + "w1"]))
    up = T.matmul(flat, params[p + "w2"])
    mlp = T.matmul(T.mul(gate, up), params[p + "w3"])
    return T.add(hidden, T.reshape(mlp, (B, S, d)))


def forward_hidden(params: dict[str, Tensor], config: ModelConfig,
                   layouts: list[SequenceLayout], cache: Optional[KVCache] = None) -> Tensor:
    """Full stack: embeddings, blocks, final norm -> [B, S, d]."""
    hidden = embed_sequence(params, config, layouts)
    for layer in range(config.n_layers):
        hidden = block_forward(params, config, layer, hidden, cache)
    if cache is not None:
        cache.advance(layouts[0].length)
    return T.rmsnorm(hidden, params["final_norm"], config.norm_eps)


def text_logits(params: dict[str, Tensor], config: ModelConfig, rows: Tensor) -> Tensor:
    """Vocabulary logits for [N, d] rows: tied (or untied) head + soft cap."""
    if config.tied_lm_head:
        logits = T.matmul(rows, T.transpose(params["tok_emb"], (1, 0)))
    else:
        logits = T.matmul(rows, params["lm_head"])
    return soft_cap(logits, config.softcap_alpha)
