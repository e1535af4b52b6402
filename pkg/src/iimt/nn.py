"""Transformer building blocks shared by every network in the package.

Pre-norm residual layers throughout: layer norm precedes each sub-layer
and a final norm closes each stack. Attention supports causal masking and
an additive per-head 2D relative position bias for token grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .seeding import SeedStream

MASK_NEG = -1e9  # additive logit mask; exp underflows to exactly 0


@dataclass
class AttentionConfig:
    model_dim: int
    num_heads: int
    ffn_dim: int
    dropout_rate: float = 0.0
    causal: bool = False
    rel_pos_2d: bool = False

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class Module:
    """Tiny parameter registry: named tensors plus named children."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, c in self._children.items():
            out.update(c.named_parameters(prefix + name + "."))
        return out

    def state(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: Dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ConfigError(f"state missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=ad.DTYPE)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter '{name}' shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None


def _init(rng: np.random.Generator, shape, scale: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = self.param("w", _init(rng, (d_in, d_out)))
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = self.param("table", _init(rng, (vocab, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ad.embedding(self.table, ids)


class PositionalEmbedding(Module):
    """Learned absolute positions, looked up by index."""

    def __init__(self, max_len: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.max_len = max_len
        self.table = self.param("table", _init(rng, (max_len, dim)))

    def __call__(self, length: int) -> Tensor:
        if length > self.max_len:
            raise ContractError(f"sequence length {length} exceeds positional table {self.max_len}")
        return ad.embedding(self.table, np.arange(length))


class RelPos2D(Module):
    """Per-head additive logit bias indexed by bucketed (drow, dcol).

    Buckets cover displacements up to the configured grid minus one;
    anything farther is clamped to the boundary bucket.
    """

    def __init__(self, num_heads: int, grid_h: int, grid_w: int, rng: np.random.Generator):
        super().__init__()
        self.num_heads = num_heads
        self.radius_h = grid_h - 1
        self.radius_w = grid_w - 1
        n_buckets = (2 * self.radius_h + 1) * (2 * self.radius_w + 1)
        self.table = self.param("table", _init(rng, (n_buckets, num_heads)))

    def bucket_index(self, grid_h: int, grid_w: int) -> np.ndarray:
        """[N, N] bucket ids for every (query patch, key patch) pair."""
        rows = np.repeat(np.arange(grid_h), grid_w)
        cols = np.tile(np.arange(grid_w), grid_h)
        drow = np.clip(rows[None, :] - rows[:, None], -self.radius_h, self.radius_h)
        dcol = np.clip(cols[None, :] - cols[:, None], -self.radius_w, self.radius_w)
        return (drow + self.radius_h) * (2 * self.radius_w + 1) + (dcol + self.radius_w)

    def bias(self, grid_h: int, grid_w: int) -> Tensor:
        """[num_heads, N, N] additive attention bias for an h-by-w grid."""
        idx = self.bucket_index(grid_h, grid_w)
        n = grid_h * grid_w
        looked = ad.embedding(self.table, idx.reshape(-1))  # [N*N, heads]
        return looked.reshape((n, n, self.num_heads)).transpose((2, 0, 1))


def causal_mask(t: int) -> np.ndarray:
    """[t, t] additive bias: 0 on/below the diagonal, MASK_NEG above."""
    return np.triu(np.full((t, t), MASK_NEG), k=1)


class MultiHeadAttention(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.wq = self.child("wq", Linear(d, d, rng))
        self.wk = self.child("wk", Linear(d, d, rng))
        self.wv = self.child("wv", Linear(d, d, rng))
        self.wo = self.child("wo", Linear(d, d, rng))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask_bias: Optional[np.ndarray] = None,
                 rel_bias: Optional[Tensor] = None,
                 train: bool = False, seeds: Optional[SeedStream] = None) -> Tensor:
        cfg = self.cfg
        if q.shape[-1] != cfg.model_dim or k.shape[-1] != cfg.model_dim:
            raise ConfigError(
                f"attention inputs must have model_dim {cfg.model_dim}, "
                f"got {q.shape} / {k.shape}")
        tq, tk = q.shape[0], k.shape[0]
        h, hd = cfg.num_heads, cfg.head_dim

        def split(x: Tensor, t: int) -> Tensor:
            return x.reshape((t, h, hd)).transpose((1, 0, 2))

        qh = split(self.wq(q), tq)
        kh = split(self.wk(k), tk)
        vh = split(self.wv(v), tk)
        scores = (qh @ kh.transpose((0, 2, 1))) * (1.0 / math.sqrt(hd))
        if mask_bias is not None:
            scores = scores + Tensor(mask_bias[None, :, :])
        if rel_bias is not None:
            scores = scores + rel_bias
        probs = ad.softmax(scores, axis=-1)
        if train and cfg.dropout_rate > 0.0:
            probs = ad.dropout(probs, cfg.dropout_rate, seeds.next(), training=True)
        ctx = (probs @ vh).transpose((1, 0, 2)).reshape((tq, h * hd))
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(cfg.model_dim, cfg.ffn_dim, rng))
        self.fc2 = self.child("fc2", Linear(cfg.ffn_dim, cfg.model_dim, rng))
        self.cfg = cfg

    def __call__(self, x: Tensor, train: bool = False, seeds: Optional[SeedStream] = None) -> Tensor:
        y = self.fc2(ad.gelu(self.fc1(x)))
        if train and self.cfg.dropout_rate > 0.0:
            y = ad.dropout(y, self.cfg.dropout_rate, seeds.next(), training=True)
        return y


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN with residual connections."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.ln1 = self.child("ln1", LayerNorm(cfg.model_dim))
        self.attn = self.child("attn", MultiHeadAttention(cfg, rng))
        self.ln2 = self.child("ln2", LayerNorm(cfg.model_dim))
        self.ffn = self.child("ffn", FeedForward(cfg, rng))

    def __call__(self, h: Tensor, train: bool = False, seeds: Optional[SeedStream] = None) -> Tensor:
        mask = causal_mask(h.shape[0]) if self.cfg.causal else None
        x = self.ln1(h)
        h = h + self.attn(x, x, x, mask_bias=mask, train=train, seeds=seeds)
        h = h + self.ffn(self.ln2(h), train=train, seeds=seeds)
        return h


class DecoderLayer(Module):
    """Causal self-attention, one cross-attention over memory, then FFN."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.ln1 = self.child("ln1", LayerNorm(cfg.model_dim))
        self.self_attn = self.child("self_attn", MultiHeadAttention(cfg, rng))
        self.ln2 = self.child("ln2", LayerNorm(cfg.model_dim))
        self.cross_attn = self.child("cross_attn", MultiHeadAttention(cfg, rng))
        self.ln3 = self.child("ln3", LayerNorm(cfg.model_dim))
        self.ffn = self.child("ffn", FeedForward(cfg, rng))

    def __call__(self, h: Tensor, memory: Tensor, train: bool = False,
                 seeds: Optional[SeedStream] = None) -> Tensor:
        mask = causal_mask(h.shape[0])
        x = self.ln1(h)
        h = h + self.self_attn(x, x, x, mask_bias=mask, train=train, seeds=seeds)
        h = h + self.cross_attn(self.ln2(h), memory, memory, train=train, seeds=seeds)
        h = h + self.ffn(self.ln3(h), train=train, seeds=seeds)
        return h


class GatedFusion(Module):
    """Sigmoid-gated convex combination of two equally shaped streams."""

    def __init__(self, model_dim: int, rng: np.random.Generator):
        super().__init__()
        self.w_gate = self.param("w_gate", _init(rng, (model_dim, model_dim)))
        self.u_gate = self.param("u_gate", _init(rng, (model_dim, model_dim)))

    def __call__(self, h_img: Tensor, h_txt: Tensor) -> Tensor:
        if h_img.shape != h_txt.shape:
            raise ContractError(f"gated fusion shapes differ: {h_img.shape} vs {h_txt.shape}")
        gate = ad.sigmoid(h_img @ self.w_gate + h_txt @ self.u_gate)
        one = Tensor(np.ones(()))
        return gate * h_img + (one - gate) * h_txt
