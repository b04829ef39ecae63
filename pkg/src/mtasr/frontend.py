"""Trainable toy encoder, stride-2 temporal reduction, and projectors."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, LSTMLayer, Module, zero_padded
from .tensor import DTensor, ShapeError

TAP_POINTS = ("encoder_out", "after_conv2")


@dataclass(frozen=True)
class FrontendConfig:
    frame_dim: int = 16
    enc_dim: int = 64
    enc_layers: int = 2
    model_dim: int = 64
    kernel: int = 3
    reduce_layers: int = 3
    separator_tap: str = "encoder_out"

    def __post_init__(self):
        if self.enc_dim <= 0 or self.model_dim <= 0:
            raise ValueError("enc_dim and model_dim must be positive")
        if self.separator_tap not in TAP_POINTS:
            raise ValueError(f"separator_tap must be one of {TAP_POINTS}")

    def to_dict(self) -> dict:
        return asdict(self)


def reduced_length(n: int) -> int:
    return -(-n // 2)


class Encoder(Module):
    """Frame projection followed by stacked recurrent layers; keeps length."""

    def __init__(self, cfg: FrontendConfig, rng, dtype=np.float64):
        self.norm_in = LayerNorm(cfg.frame_dim, dtype)
        self.input = Linear(cfg.frame_dim, cfg.enc_dim, rng, dtype=dtype)
        self.layers = [LSTMLayer(cfg.enc_dim, cfg.enc_dim, rng, dtype) for _ in range(cfg.enc_layers)]
        self.norm_out = LayerNorm(cfg.enc_dim, dtype)

    def __call__(self, frames: DTensor, lengths=None) -> DTensor:
        if frames.ndim == 2:
            return self(T.reshape(frames, (1, *frames.shape)))[0]
        h = T.tanh(self.input(self.norm_in(frames)))
        for layer in self.layers:
            h = layer(h)
        h = self.norm_out(h)
        return h if lengths is None else zero_padded(h, lengths)


class Reducer(Module):
    """Three kernel-3 stride-2 convolutions over time, ceil-length with zero padding.

    Returns the two-layer tap and the full-depth output.
    """

    def __init__(self, cfg: FrontendConfig, rng, dtype=np.float64):
        self.kernel = cfg.kernel
        self.convs = [
            Linear(cfg.kernel * cfg.enc_dim, cfg.enc_dim, rng, dtype=dtype, gain=np.sqrt(6.0)) for _ in range(cfg.reduce_layers)
        ]

    def __call__(self, h: DTensor, lengths=None):
        if h.ndim == 2:
            h2, hd, _, _ = self(T.reshape(h, (1, *h.shape)))
            return h2[0], hd[0]
        if lengths is None:
            lengths = np.full(h.shape[0], h.shape[1])
        lengths = np.asarray(lengths)
        taps = []
        for conv in self.convs:
            h = T.relu(conv(T.unfold_time(h, self.kernel, 2)))
            lengths = -(-lengths // 2)
            h = zero_padded(h, lengths)
            taps.append((h, lengths))
        (h2, len2), (hd, lend) = taps[1], taps[-1]
        return h2, hd, len2, lend


class Projector(Linear):
    """Linear map with bias into the decoder width."""

    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64):
        super().__init__(d_in, d_out, rng, dtype=dtype, gain=np.sqrt(3.0))

    def __call__(self, x: DTensor) -> DTensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projector expects last dim {self.d_in}, got {x.shape[-1]}")
        return super().__call__(x)
