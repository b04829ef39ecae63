"""Parameter containers and the small set of layers the models are built from."""

from __future__ import annotations

from collections.abc import Iterator

import numpy as np

from . import tensor as T
from .tensor import DTensor


class Parameter(DTensor):
    """A trainable leaf tensor owned by a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float64):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)


class Module:
    """Attribute-walking container: parameters, submodules, lists of submodules.

    Attributes whose names start with an underscore are not traversed.
    """

    training = False
    _rng: np.random.Generator | None = None

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Module):
                yield from value.named_modules(path)
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{path}.{i}")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter) and not name.startswith("_"):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def freeze(self) -> Module:
        for _, p in self.named_parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> Module:
        for _, p in self.named_parameters():
            p.requires_grad = True
        return self

    def train(self, rng: np.random.Generator | None = None) -> Module:
        for _, mod in self.named_modules():
            mod.training = True
            mod._rng = rng
        return self

    def eval(self) -> Module:
        for _, mod in self.named_modules():
            mod.training = False
            mod._rng = None
        return self


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as (d_out, d_in); may carry a LoRA slot."""

    def __init__(
        self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64, gain: float = 1.0
    ):
        # gain sqrt(3) preserves variance, sqrt(6) compensates a following ReLU
        bound = gain / np.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_out, d_in), bound, dtype), dtype)
        self.bias = Parameter(np.zeros(d_out), dtype) if bias else None
        self.lora = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: DTensor) -> DTensor:
        y = T.linear(x, self.weight, self.bias)
        if self.lora is not None and self.lora.enabled:
            y = y + self.lora.delta(x)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim), dtype)
        self.offset = Parameter(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: DTensor) -> DTensor:
        return T.layernorm(x, self.gain, self.offset, self.eps)


class LSTMLayer(Module):
    """One unidirectional LSTM layer over (B, T, D_in) inputs."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        self.input = Linear(d_in, 4 * hidden, rng, dtype=dtype)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.input.bias.data = bias.astype(dtype)
        bound = 1.0 / np.sqrt(hidden)
        self.recurrent = Parameter(_uniform(rng, (4 * hidden, hidden), bound, dtype), dtype)

    def __call__(self, x: DTensor) -> DTensor:
        return T.lstm(self.input(x), self.recurrent)


def drop(module: Module, x: DTensor, p: float) -> DTensor:
    """Dropout driven by the module's train/eval state."""
    if p <= 0.0 or not module.training:
        return x
    return T.dropout(x, p, module._rng, True)


def reverse_time(x: DTensor, lengths=None) -> DTensor:
    """Reverse each sequence of a (B, T, D) batch within its own length; padding stays put."""
    b, t = x.shape[:2]
    n = np.full(b, t) if lengths is None else np.asarray(lengths)
    steps = np.arange(t)[None, :]
    idx = np.where(steps < n[:, None], n[:, None] - 1 - steps, steps)
    return T.getitem(x, (np.arange(b)[:, None], idx))


class BiLSTMLayer(Module):
    """Forward and time-reversed LSTMs of half width each, concatenated."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        if hidden < 2:
            raise ValueError("a bidirectional layer needs hidden >= 2")
        self.forward = LSTMLayer(d_in, hidden // 2, rng, dtype)
        self.backward = LSTMLayer(d_in, hidden - hidden // 2, rng, dtype)

    def __call__(self, x: DTensor, lengths=None) -> DTensor:
        back = reverse_time(self.backward(reverse_time(x, lengths)), lengths)
        return T.concat([self.forward(x), back], axis=2)


def time_mask(lengths, max_len: int) -> np.ndarray:
    """(B, T) boolean validity mask."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def zero_padded(x: DTensor, lengths) -> DTensor:
    """Zero every time step at or beyond each sequence's length (axis 1)."""
    mask = time_mask(lengths, x.shape[1])
    if mask.all():
        return x
    return T.where(mask[:, :, None], x, DTensor(np.zeros(x.shape, dtype=x.dtype)))


def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out.astype(dtype)
