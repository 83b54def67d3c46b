"""Hierarchical encoder for multi-channel series.

Each channel is segmented at several window sizes, embedded patch-wise, and
compressed through a per-granularity stack of dual-attention blocks whose
token counts strictly decrease. Granularity outputs are fused by one more
block, flattened into a channel vector, and the channel vectors interact in
a final dual-attention pass at channel-vector width before a linear head
projects to the shared latent space. All channels run through the same
weights, so one model instance serves any channel count and any series
length within the positional table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, Linear, TsdaBlock
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor


def segment(series: np.ndarray, window: int) -> np.ndarray:
    """Split a 1-D series into ceil(L / window) non-overlapping patches.

    The last patch is zero-padded on the right when window does not divide
    L, so concatenating the rows and truncating recovers the input exactly.
    """
    series = np.asarray(series)
    if series.ndim != 1 or series.size < 1:
        raise DimensionError(f"segment expects a non-empty 1-D series, got shape {series.shape}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    n = -(-series.size // window)
    padded = np.zeros(n * window, dtype=series.dtype)
    padded[:series.size] = series
    return padded.reshape(n, window)


class PatchEmbedder:
    """Linear patch projection plus a learned additive positional table."""

    def __init__(self, rng: np.random.Generator, window: int, model_dim: int,
                 max_patches: int = 512, positional: bool = True):
        self.window = window
        self.max_patches = max_patches
        self.proj = Linear(rng, window, model_dim)
        self.pos = (Tensor(T.gaussian(rng, (max_patches, model_dim)), requires_grad=True)
                    if positional else None)

    def __call__(self, patches: Tensor) -> Tensor:
        if patches.shape[1] != self.window:
            raise DimensionError(
                f"patches of width {self.window} expected, got {patches.shape}")
        n = patches.shape[0]
        if self.pos is not None and n > self.max_patches:
            raise ConfigError(
                f"{n} patches exceed the positional table ({self.max_patches}); "
                f"raise max_patches")
        out = self.proj(patches)
        if self.pos is not None:
            out = T.add(out, T.slice_axis(self.pos, 0, 0, n))
        return out

    def named_params(self, prefix: str):
        yield from self.proj.named_params(prefix + "proj.")
        if self.pos is not None:
            yield prefix + "pos", self.pos


@dataclass(frozen=True)
class GranularitySpec:
    """Distinct window sizes, kept sorted ascending."""

    window_sizes: tuple

    def __post_init__(self):
        sizes = tuple(self.window_sizes)
        if not sizes:
            raise ConfigError("at least one window size is required")
        if any(int(s) != s or s < 1 for s in sizes):
            raise ConfigError(f"window sizes must be positive integers, got {sizes}")
        if len(set(sizes)) != len(sizes):
            raise ConfigError(f"window sizes must be distinct, got {sizes}")
        object.__setattr__(self, "window_sizes", tuple(sorted(int(s) for s in sizes)))

    def __iter__(self):
        return iter(self.window_sizes)

    def __len__(self):
        return len(self.window_sizes)


@dataclass(frozen=True)
class EncoderConfig:
    granularities: GranularitySpec
    intra_token_list: tuple
    inter_tokens: int
    cross_tokens: int
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(128))
    max_patches: int = 512
    positional: bool = True
    head_hidden: int = 0

    def __post_init__(self):
        if not isinstance(self.granularities, GranularitySpec):
            object.__setattr__(self, "granularities",
                               GranularitySpec(tuple(self.granularities)))
        tokens = tuple(int(o) for o in self.intra_token_list)
        object.__setattr__(self, "intra_token_list", tokens)
        if not tokens or any(o < 1 for o in tokens):
            raise ConfigError(f"intra_token_list must be positive, got {tokens}")
        if any(a <= b for a, b in zip(tokens, tokens[1:])):
            raise ConfigError(
                f"intra_token_list must be strictly decreasing, got {tokens}")
        if self.inter_tokens < 1 or self.cross_tokens < 1:
            raise ConfigError("inter_tokens and cross_tokens must be positive")
        if self.max_patches < 1:
            raise ConfigError("max_patches must be positive")
        if self.head_hidden < 0:
            raise ConfigError("head_hidden must be non-negative")

    @property
    def model_dim(self) -> int:
        return self.attention.model_dim

    @property
    def prior_dim(self) -> int:
        return self.attention.prior_dim

    @property
    def channel_dim(self) -> int:
        # width of one flattened channel vector
        return self.inter_tokens * self.attention.model_dim


def _trace(trace, stage: str, shape):
    if trace is not None:
        trace.append((stage, tuple(shape)))


class SparseformerModel:
    """The full encoder; parameters depend only on the config, never on (L, C)."""

    def __init__(self, rng: np.random.Generator, config: EncoderConfig):
        self.config = config
        att = config.attention
        self.embedders = [PatchEmbedder(rng, s, att.model_dim, config.max_patches,
                                        config.positional)
                          for s in config.granularities]
        self.intra = [[TsdaBlock(rng, att, o) for o in config.intra_token_list]
                      for _ in config.granularities]
        self.inter = TsdaBlock(rng, att, config.inter_tokens)
        cross_att = AttentionConfig(model_dim=config.channel_dim,
                                    num_heads=att.num_heads, dropout=att.dropout,
                                    prior_dim=att.prior_dim)
        self.cross = TsdaBlock(rng, cross_att, config.cross_tokens)
        head_in = config.cross_tokens * config.channel_dim
        if config.head_hidden > 0:
            self.head = Linear(rng, head_in, config.head_hidden)
            self.head_out = Linear(rng, config.head_hidden, att.model_dim)
        else:
            self.head = Linear(rng, head_in, att.model_dim)
            self.head_out = None

    # ------------------------------------------------------------ stages

    def embed_patches(self, patches: np.ndarray, gran_index: int) -> Tensor:
        return self.embedders[gran_index](Tensor(patches.astype(T.float_dtype())))

    def intra_encode(self, patches: Tensor, gran_index: int, prior,
                     rng=None, trace=None, label: str = "") -> Tensor:
        h = patches
        for k, block in enumerate(self.intra[gran_index]):
            h = block(h, prior=prior, rng=rng)
            _trace(trace, f"intra{label}[{k}]", h.shape)
        return h

    def inter_encode(self, intra_outputs: list, prior, rng=None, trace=None) -> Tensor:
        o_last = self.config.intra_token_list[-1]
        for out in intra_outputs:
            if out.shape != (o_last, self.config.model_dim):
                raise DimensionError(
                    f"intra outputs must all be [{o_last}, {self.config.model_dim}], "
                    f"got {out.shape}")
        merged = intra_outputs[0] if len(intra_outputs) == 1 else T.concat(intra_outputs, axis=0)
        _trace(trace, "inter_input", merged.shape)
        out = self.inter(merged, prior=prior, rng=rng)
        _trace(trace, "inter", out.shape)
        return out

    def encode_channel(self, series: np.ndarray, prior, rng=None,
                       trace=None, label: str = "") -> Tensor:
        """One channel series [L] -> flattened channel vector [1, D_c]."""
        intra_outputs = []
        for gi, window in enumerate(self.config.granularities):
            patches = segment(series, window)
            _trace(trace, f"segment{label}[s={window}]", patches.shape)
            p = self.embed_patches(patches, gi)
            _trace(trace, f"embed{label}[s={window}]", p.shape)
            intra_outputs.append(self.intra_encode(p, gi, prior, rng, trace,
                                                   f"{label}[s={window}]"))
        fused = self.inter_encode(intra_outputs, prior, rng, trace)
        return T.reshape(fused, (1, self.config.channel_dim))

    def cross_channel_encode(self, channel_vectors: list, prior,
                             rng=None, trace=None) -> Tensor:
        """Channel vectors (each [1, D_c]) -> latent sample vector [D]."""
        dc = self.config.channel_dim
        for vec in channel_vectors:
            if vec.shape != (1, dc):
                raise DimensionError(
                    f"channel vectors must be [1, {dc}], got {vec.shape}")
        stacked = (channel_vectors[0] if len(channel_vectors) == 1
                   else T.concat(channel_vectors, axis=0))
        _trace(trace, "channels", stacked.shape)
        mixed = self.cross(stacked, prior=prior, rng=rng)
        _trace(trace, "cross", mixed.shape)
        flat = T.reshape(mixed, (1, self.config.cross_tokens * dc))
        out = self.head(flat)
        if self.head_out is not None:
            out = self.head_out(T.gelu(out))
        _trace(trace, "head", (out.shape[1],))
        return T.reshape(out, (out.shape[1],))

    # ------------------------------------------------------------- whole

    def encode_sample(self, x, prior=None, rng=None, trace=None) -> Tensor:
        """Sample [L, C] -> latent vector [D]. Channels share all weights."""
        data = x.data if isinstance(x, Tensor) else np.asarray(x)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"encode_sample expects [L, C] with L,C >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("encode_sample input contains non-finite values")
        vectors = [self.encode_channel(data[:, c], prior, rng, trace, f"[c={c}]")
                   for c in range(data.shape[1])]
        return self.cross_channel_encode(vectors, prior, rng, trace)

    def encode_batch(self, xs: np.ndarray, prior=None, rng=None) -> Tensor:
        """Batch [B, L, C] -> latent matrix [B, D]."""
        xs = np.asarray(xs)
        if xs.ndim != 3:
            raise DimensionError(f"encode_batch expects [B, L, C], got {xs.shape}")
        rows = [T.reshape(self.encode_sample(xs[b], prior, rng), (1, self.config.model_dim))
                for b in range(xs.shape[0])]
        return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)

    # -------------------------------------------------------- parameters

    def named_params(self):
        for window, emb in zip(self.config.granularities, self.embedders):
            yield from emb.named_params(f"embed.s{window}.")
        for window, stack in zip(self.config.granularities, self.intra):
            for k, block in enumerate(stack):
                yield from block.named_params(f"intra.s{window}.b{k}.")
        yield from self.inter.named_params("inter.")
        yield from self.cross.named_params("cross.")
        yield from self.head.named_params("head.")
        if self.head_out is not None:
            yield from self.head_out.named_params("head_out.")

    def params(self) -> dict:
        return dict(self.named_params())

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def load_state(self, arrays: dict):
        """Assign parameter arrays by name; the key sets must match exactly."""
        params = self.params()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ConfigError(
                f"parameter names do not match model: missing {missing[:3]}, "
                f"unexpected {extra[:3]}")
        for name, tensor in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != tensor.shape:
                raise DimensionError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {tensor.shape}")
            tensor.data = arr.astype(T.float_dtype())
