"""Reusable network blocks built on the autograd tensor core.

Linear projection, multi-head attention (self and cross), position-wise
feed-forward, sinusoidal positional encoding, inverted dropout, and a
standard pre-norm transformer encoder layer. Blocks accept either a single
window ``[L, D]`` or a batch of windows ``[B, L, D]``; parameters are plain
tensors exposed via ``named_parameters`` for the optimizer and checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _init_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def prefixed(prefix: str, items) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{name}", p) for name, p in items]


def dropout(x: Tensor, rate: float, train: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / keep
    return T.mul(x, T.constant(mask))


class Linear:
    """Affine map x @ W + b with Xavier-uniform init (bias optional)."""

    def __init__(self, in_dim: int, out_dim: int, rng, dtype=np.float64,
                 bias: bool = True):
        rng = _init_rng(rng)
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(rng.uniform(-limit, limit, (in_dim, out_dim)),
                             requires_grad=True, dtype=dtype)
        self.bias = (Tensor(np.zeros(out_dim), requires_grad=True, dtype=dtype)
                     if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.ShapeError(f"linear: input last dim {x.shape[-1]} != {self.in_dim}")
        out = T.matmul(x, self.weight)
        return out if self.bias is None else T.add(out, self.bias)

    def named_parameters(self):
        if self.bias is None:
            return [("weight", self.weight)]
        return [("weight", self.weight), ("bias", self.bias)]

    @staticmethod
    def param_count(in_dim: int, out_dim: int, bias: bool = True) -> int:
        return in_dim * out_dim + (out_dim if bias else 0)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    @staticmethod
    def param_count(dim: int) -> int:
        return 2 * dim


class MultiHeadAttention:
    """Scaled dot-product attention with per-head splitting.

    Query, key and value each go through their own projection; per-head
    scaling uses d_k = dim / heads; head outputs are concatenated and passed
    through the output projection (with dropout in train mode). Cross
    attention is the q_in != kv_in case.
    """

    def __init__(self, dim: int, heads: int, dropout_rate: float, rng,
                 dtype=np.float64):
        if dim % heads != 0:
            raise ValueError(f"heads ({heads}) must divide model dim ({dim})")
        rng = _init_rng(rng)
        self.dim = dim
        self.heads = heads
        self.d_k = dim // heads
        self.dropout_rate = dropout_rate
        self.wq = Linear(dim, dim, rng, dtype)
        # No key bias: softmax(q k^T) is invariant to a per-row shift, so a
        # key-side bias would be a dead parameter with an exactly-zero grad.
        self.wk = Linear(dim, dim, rng, dtype, bias=False)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, q_in: Tensor, kv_in: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None,
                 keep_weights: bool = False) -> Tensor:
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise T.ShapeError(f"attention: last dims {q_in.shape[-1]}/{kv_in.shape[-1]} "
                               f"!= model dim {self.dim}")
        squeeze = q_in.ndim == 2
        if squeeze:
            q_in = T.reshape(q_in, (1,) + q_in.shape)
            kv_in = T.reshape(kv_in, (1,) + kv_in.shape)
        b, lq = q_in.shape[0], q_in.shape[1]
        lk = kv_in.shape[1]

        def heads_first(t: Tensor, length: int) -> Tensor:
            t = T.reshape(t, (b, length, self.heads, self.d_k))
            return T.transpose(t, (0, 2, 1, 3))

        q = heads_first(self.wq(q_in), lq)
        k = heads_first(self.wk(kv_in), lk)
        v = heads_first(self.wv(kv_in), lk)

        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_k))
        weights = T.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data.copy()
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, self.dim))
        out = dropout(self.wo(ctx), self.dropout_rate, train, rng)
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    def named_parameters(self):
        return (prefixed("wq", self.wq.named_parameters())
                + prefixed("wk", self.wk.named_parameters())
                + prefixed("wv", self.wv.named_parameters())
                + prefixed("wo", self.wo.named_parameters()))

    @staticmethod
    def param_count(dim: int) -> int:
        return 3 * Linear.param_count(dim, dim) + Linear.param_count(dim, dim, bias=False)


class FeedForward:
    """Position-wise MLP: dim -> mult*dim -> dim with GELU and hidden dropout."""

    def __init__(self, dim: int, mult: int, dropout_rate: float, rng,
                 dtype=np.float64):
        rng = _init_rng(rng)
        self.dim = dim
        self.dropout_rate = dropout_rate
        self.lin1 = Linear(dim, mult * dim, rng, dtype)
        self.lin2 = Linear(mult * dim, dim, rng, dtype)

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = dropout(T.gelu(self.lin1(x)), self.dropout_rate, train, rng)
        return self.lin2(h)

    def named_parameters(self):
        return prefixed("lin1", self.lin1.named_parameters()) + \
            prefixed("lin2", self.lin2.named_parameters())

    @staticmethod
    def param_count(dim: int, mult: int) -> int:
        return Linear.param_count(dim, mult * dim) + Linear.param_count(mult * dim, dim)


class TransformerEncoderLayer:
    """Pre-norm transformer layer: x + Attn(Norm(x)), then + FFN(Norm(.))."""

    def __init__(self, dim: int, heads: int, dropout_rate: float, rng,
                 ffn_mult: int = 4, dtype=np.float64):
        rng = _init_rng(rng)
        self.dim = dim
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, dropout_rate, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, ffn_mult, dropout_rate, rng, dtype)

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        n1 = self.norm1(x)
        h = T.add(x, self.attn(n1, n1, train, rng))
        return T.add(h, self.ffn(self.norm2(h), train, rng))

    def named_parameters(self):
        return (prefixed("norm1", self.norm1.named_parameters())
                + prefixed("attn", self.attn.named_parameters())
                + prefixed("norm2", self.norm2.named_parameters())
                + prefixed("ffn", self.ffn.named_parameters()))

    @staticmethod
    def param_count(dim: int, ffn_mult: int = 4) -> int:
        return (2 * LayerNorm.param_count(dim)
                + MultiHeadAttention.param_count(dim)
                + FeedForward.param_count(dim, ffn_mult))


class PositionalEncoding:
    """Fixed sinusoidal table [max_len, dim]; added once after projection."""

    def __init__(self, max_len: int, dim: int, dtype=np.float64):
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        i = np.arange(dim, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
        table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
        self.max_len = max_len
        self.dim = dim
        self.table = table.astype(dtype)

    def __call__(self, x: Tensor) -> Tensor:
        length = x.shape[-2]
        if length > self.max_len:
            raise T.ShapeError(f"positional encoding: sequence length {length} exceeds "
                               f"table size {self.max_len}")
        return T.add(x, T.constant(self.table[:length]))
