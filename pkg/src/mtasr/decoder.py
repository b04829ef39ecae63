"""Toy pre-norm transformer decoder with optional cross-attention adapters.

Each block runs causal self-attention (with residual), then an optional
cross-attention adapter over an external memory, then the feed-forward
sub-layer. The adapter either replaces the state with its normalised output
(``stacked``) or blends it in through a learnable sigmoid gate (``gated``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, Parameter, drop, sinusoidal_positions, time_mask
from .tensor import NEG_INF, DTensor

ADAPTER_MODES = ("none", "stacked", "gated")
GATE_INIT = -2.0


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 43
    layers: int = 4
    model_dim: int = 64
    heads: int = 4
    adapter_dim: int = 32
    adapter_heads: int = 1
    adapter_mode: str = "none"
    mlp_dim: int = 128
    max_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.adapter_dim <= 0:
            raise ValueError("adapter_dim must be positive")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ValueError(f"adapter_mode must be one of {ADAPTER_MODES}")
        if self.adapter_heads != 1:
            raise ValueError("only single-head adapters are implemented")

    def to_dict(self) -> dict:
        return asdict(self)


def causal_bias(length: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1).astype(dtype)


def memory_bias(valid: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive bias from a (B, T_m) validity mask; every row needs a valid slot."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise ValueError("memory mask leaves a sample with no valid position")
    return np.where(valid, 0.0, NEG_INF).astype(dtype)


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float64, dropout: float = 0.0):
        self.norm = LayerNorm(dim, dtype)
        self.dropout = dropout
        self.q = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.k = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.v = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.o = Linear(dim, dim, rng, bias=False, dtype=dtype)
        self.heads = heads
        self._weights = None

    def __call__(self, x: DTensor) -> DTensor:
        b, length, dim = x.shape
        hd = dim // self.heads
        xn = self.norm(x)

        def split(t):
            return T.transpose(T.reshape(t, (b, length, self.heads, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q(xn)), split(self.k(xn)), split(self.v(xn))
        scores = T.scale(q @ T.swap_last(k), 1.0 / np.sqrt(hd))
        att = T.softmax_lastdim(scores, causal_bias(length, x.dtype))
        self._weights = att.data
        ctx = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, length, dim))
        return x + drop(self, self.o(ctx), self.dropout)

    @property
    def last_weights(self) -> np.ndarray | None:
        return self._weights


class CrossAttentionAdapter(Module):
    """Single-head cross-attention from decoder states to an external memory."""

    def __init__(self, dim: int, attn_dim: int, rng, dtype=np.float64, dropout: float = 0.0):
        self.dropout = dropout
        self.norm_in = LayerNorm(dim, dtype)
        self.norm_out = LayerNorm(dim, dtype)
        self.q = Linear(dim, attn_dim, rng, bias=False, dtype=dtype)
        self.k = Linear(dim, attn_dim, rng, bias=False, dtype=dtype)
        self.v = Linear(dim, attn_dim, rng, bias=False, dtype=dtype)
        self.o = Linear(attn_dim, dim, rng, bias=False, dtype=dtype)
        self.gate = Parameter(GATE_INIT, dtype)
        self.attn_dim = attn_dim
        self._weights = None

    def base(self, h: DTensor, memory: DTensor, bias=None) -> DTensor:
        """``LN_out(h + U)``: the ungated cross-attention output."""
        q = self.q(self.norm_in(h))
        k, v = self.k(memory), self.v(memory)
        scores = T.scale(q @ T.swap_last(k), 1.0 / np.sqrt(self.attn_dim))
        if bias is not None and h.ndim == 3:
            bias = np.asarray(bias)[:, None, :]
        att = T.softmax_lastdim(scores, bias)
        self._weights = att.data
        return self.norm_out(h + drop(self, self.o(att @ v), self.dropout))

    def __call__(self, h: DTensor, memory: DTensor, bias=None, mode: str = "gated") -> DTensor:
        h_base = self.base(h, memory, bias)
        if mode == "stacked":
            return h_base
        if mode != "gated":
            raise ValueError(f"unknown adapter mode {mode!r}")
        return h + T.mul(h_base - h, T.sigmoid(self.gate))

    @property
    def last_weights(self) -> np.ndarray | None:
        return self._weights


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float64, dropout: float = 0.0):
        self.dropout = dropout
        self.norm = LayerNorm(dim, dtype)
        self.up = Linear(dim, hidden, rng, dtype=dtype)
        self.down = Linear(hidden, dim, rng, dtype=dtype)

    def __call__(self, x: DTensor) -> DTensor:
        return x + drop(self, self.down(T.relu(self.up(self.norm(x)))), self.dropout)


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float64):
        self.attn = SelfAttention(cfg.model_dim, cfg.heads, rng, dtype, cfg.dropout)
        self.adapter = None
        self.mlp = FeedForward(cfg.model_dim, cfg.mlp_dim, rng, dtype, cfg.dropout)

    def __call__(self, x, memory=None, bias=None, mode="none"):
        h = self.attn(x)
        if self.adapter is not None and mode != "none":
            if memory is None:
                raise ValueError("adapter layers need a memory")
            h = self.adapter(h, memory, bias, mode)
        return self.mlp(h)


class Decoder(Module):
    """Token embedding table, blocks, final norm and output head."""

    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float64):
        self.embed = Parameter(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.model_dim)), dtype)
        self.blocks = [DecoderBlock(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.model_dim, dtype)
        self.head = Linear(cfg.model_dim, cfg.vocab_size, rng, dtype=dtype)
        self.mode = "none"
        self._positions = sinusoidal_positions(cfg.max_len, cfg.model_dim, dtype)
        self.max_len = cfg.max_len
        self.dropout = cfg.dropout

    def insert_adapters(self, mode: str, attn_dim: int, rng) -> None:
        if mode not in ("stacked", "gated"):
            raise ValueError(f"cannot insert adapters in mode {mode!r}")
        dim, dtype = self.embed.shape[1], self.embed.dtype
        for block in self.blocks:
            if block.adapter is None:
                block.adapter = CrossAttentionAdapter(dim, attn_dim, rng, dtype, self.dropout)
        self.mode = mode

    def calibrate_adapters(self, x: DTensor, lengths) -> None:
        """Fit each adapter's output norm so that LN_out(h) best matches h on real activations.

        With U = 0 the correction LN_out(h) - h then starts near zero instead of
        rescaling the whole residual stream.
        """
        valid = time_mask(lengths, x.shape[1])
        h = x.data + self._positions[: x.shape[1]]
        for block in self.blocks:
            h = block.attn(DTensor(h)).data
            if block.adapter is not None:
                rows = h[valid].astype(np.float64)
                var = rows.var(-1, keepdims=True) + block.adapter.norm_out.eps
                z = (rows - rows.mean(-1, keepdims=True)) / np.sqrt(var)
                # weighted least squares per channel; 1/var keeps a few loud rows from dominating
                w = 1.0 / var
                zm, hm = (w * z).sum(0) / w.sum(), (w * rows).sum(0) / w.sum()
                gain = (w * (z - zm) * (rows - hm)).sum(0) / np.maximum((w * (z - zm) ** 2).sum(0), 1e-12)
                block.adapter.norm_out.gain.data[:] = gain
                block.adapter.norm_out.offset.data[:] = hm - gain * zm
            h = block.mlp(DTensor(h)).data

    def embed_tokens(self, ids) -> DTensor:
        return T.embedding(self.embed, ids)

    def __call__(self, x: DTensor, memory: DTensor | None = None, bias=None) -> DTensor:
        """Logits for every position of the (B, L, D) input sequence."""
        length = x.shape[1]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.max_len}")
        h = x + DTensor(self._positions[:length] * np.ones((x.shape[0], 1, 1), dtype=x.dtype))
        for block in self.blocks:
            h = block(h, memory, bias, self.mode)
        return self.head(self.norm(h))
