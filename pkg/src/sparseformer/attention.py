"""Multi-head self-attention and the token-sparse dual-attention block.

A block runs two attention stages: standard self-attention over the L input
tokens, then cross-attention from a fixed set of learnable queries onto the
attended tokens. The second stage compresses any input length to exactly
`num_queries` output tokens, so block parameters never depend on L. Queries
can be conditioned on a dataset-level prior vector by feature concatenation
followed by a learned projection back to model width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 8
    dropout: float = 0.1
    prior_dim: int = 64

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ConfigError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.prior_dim < 0:
            raise ConfigError("prior_dim must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class Linear:
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int,
                 bias: bool = True):
        self.w = Tensor(T.xavier_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)

    def named_params(self, prefix: str):
        yield prefix + "w", self.w
        if self.b is not None:
            yield prefix + "b", self.b


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def residual(self, res: Tensor, x: Tensor) -> Tensor:
        return T.residual_layer_norm(res, x, self.gamma, self.beta, self.eps)

    def named_params(self, prefix: str):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta


class FeedForward:
    """linear (D -> 2D), gelu, linear (2D -> D)."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.lin1 = Linear(rng, dim, 2 * dim)
        self.lin2 = Linear(rng, 2 * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.mlp(x, self.lin1.w, self.lin1.b, self.lin2.w, self.lin2.b)

    def named_params(self, prefix: str):
        yield from self.lin1.named_params(prefix + "lin1.")
        yield from self.lin2.named_params(prefix + "lin2.")


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return T.mul(x, Tensor(keep))


class SelfAttention:
    """Standard multi-head scaled dot-product attention with output projection."""

    def __init__(self, rng: np.random.Generator, config: AttentionConfig):
        self.config = config
        d = config.model_dim
        self.wq = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)
        self.wk = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)
        self.wv = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)
        self.wo = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)

    def __call__(self, h: Tensor, collect=None) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.config.model_dim:
            raise DimensionError(
                f"self_attention expects [L, {self.config.model_dim}], got {h.shape}")
        return T.self_attention(h, self.wq, self.wk, self.wv, self.wo,
                                self.config.num_heads, collect)

    def named_params(self, prefix: str):
        for name in ("wq", "wk", "wv", "wo"):
            yield prefix + name, getattr(self, name)


class TsdaBlock:
    """Self-attention followed by token-sparse attention from learnable queries.

    Output always has `num_queries` tokens regardless of input length; the
    parameter set depends only on (num_queries, model_dim, prior_dim).
    """

    def __init__(self, rng: np.random.Generator, config: AttentionConfig,
                 num_queries: int):
        if num_queries < 1:
            raise ConfigError("num_queries must be positive")
        self.config = config
        self.num_queries = num_queries
        d = config.model_dim
        self.queries = Tensor(T.gaussian(rng, (num_queries, d)), requires_grad=True)
        self.fusion = Linear(rng, d + config.prior_dim, d)
        self.self_attn = SelfAttention(rng, config)
        self.ffn1 = FeedForward(rng, d)
        self.ffn2 = FeedForward(rng, d)
        self.wk_sparse = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)
        self.wv_sparse = Tensor(T.xavier_uniform(rng, d, d), requires_grad=True)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.norm3 = LayerNorm(d)
        self.norm4 = LayerNorm(d)

    def augment_queries(self, prior: Tensor | None) -> Tensor:
        """Fuse the dataset prior into the queries (feature concat + projection)."""
        if self.config.prior_dim == 0:
            return self.fusion(self.queries)
        if prior is None or prior.size != self.config.prior_dim:
            got = "none" if prior is None else str(prior.shape)
            raise DimensionError(
                f"prior of dim {self.config.prior_dim} required, got {got}")
        return T.augmented_linear(self.queries, prior, self.fusion.w, self.fusion.b)

    def sparse_attention(self, q_aug: Tensor, h_self: Tensor, collect=None) -> Tensor:
        """Cross-attention from the augmented queries onto the attended tokens."""
        if h_self.shape[1] != self.config.model_dim:
            raise DimensionError(
                f"expected tokens of width {self.config.model_dim}, got {h_self.shape}")
        return T.cross_attention(q_aug, h_self, self.wk_sparse, self.wv_sparse,
                                 self.config.num_heads, collect)

    def __call__(self, h: Tensor, prior: Tensor | None = None,
                 rng: np.random.Generator | None = None, collect=None) -> Tensor:
        drop = self.config.dropout
        a = _dropout(self.self_attn(h, collect), drop, rng)
        h1 = self.norm1.residual(h, a)
        h2 = self.norm2.residual(h1, _dropout(self.ffn1(h1), drop, rng))
        q_aug = self.augment_queries(prior)
        s = _dropout(self.sparse_attention(q_aug, h2, collect), drop, rng)
        h3 = self.norm3.residual(q_aug, s)
        return self.norm4.residual(h3, _dropout(self.ffn2(h3), drop, rng))

    def named_params(self, prefix: str):
        yield prefix + "queries", self.queries
        yield from self.fusion.named_params(prefix + "fusion.")
        yield from self.self_attn.named_params(prefix + "self_attn.")
        yield from self.ffn1.named_params(prefix + "ffn1.")
        yield from self.ffn2.named_params(prefix + "ffn2.")
        yield prefix + "wk_sparse", self.wk_sparse
        yield prefix + "wv_sparse", self.wv_sparse
        yield from self.norm1.named_params(prefix + "norm1.")
        yield from self.norm2.named_params(prefix + "norm2.")
        yield from self.norm3.named_params(prefix + "norm3.")
        yield from self.norm4.named_params(prefix + "norm4.")
