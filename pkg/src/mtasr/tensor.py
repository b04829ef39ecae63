"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable value is a :class:`DTensor`. Operations record their
inputs and a local backward rule when at least one input requires a gradient
and recording is enabled (see :func:`no_grad`). ``loss.backward()`` walks the
recorded graph once in reverse topological order and then releases it.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a trailing row vector (bias), or a scalar. Leading batch axes are
otherwise explicit.
"""

from __future__ import annotations

import contextlib
from collections.abc import Iterable, Sequence

import numpy as np
from scipy.special import expit

NEG_INF = -1e30
"""Finite stand-in for minus infinity shared by attention masks and CTC."""

_MASK_THRESHOLD = NEG_INF / 2
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class DTensor:
    """Dense array with an optional gradient slot."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DTensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> DTensor:
        return DTensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DTensor(shape={self.shape}, op={self._op!r}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate gradients of this tensor into every upstream tensor."""
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._consumed = True


def topological_order(root: DTensor) -> list[DTensor]:
    """Nodes reachable from ``root``, inputs before outputs."""
    order: list[DTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def parameter(data, dtype=np.float64) -> DTensor:
    return DTensor(np.array(data, dtype=dtype), requires_grad=True)


def _as_tensor(x, dtype=None) -> DTensor:
    if isinstance(x, DTensor):
        return x
    return DTensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: tuple[DTensor, ...], backward, op: str) -> DTensor:
    out = DTensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _needs(t: DTensor) -> bool:
    return t.requires_grad


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to a scalar or trailing-row shape."""
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_broadcast(a: DTensor, b: DTensor, name: str) -> None:
    if a.shape == b.shape:
        return
    if b.size == 1 and b.ndim <= 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> DTensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.size < b.size:
        a, b = b, a
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return g, _reduce_to(g, sb) if _needs(b) else None

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> DTensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")
    sb = b.shape

    def backward(g):
        return g, -_reduce_to(g, sb) if _needs(b) else None

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> DTensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.size < b.size:
        a, b = b, a
    _check_broadcast(a, b, "mul")
    sb = b.shape
    ad, bd = a.data, b.data

    def backward(g):
        ga = g * bd if _needs(a) else None
        gb = _reduce_to(g * ad, sb) if _needs(b) else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def scale(a: DTensor, c: float) -> DTensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def exp(a: DTensor) -> DTensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: DTensor) -> DTensor:
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a: DTensor) -> DTensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: DTensor) -> DTensor:
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: DTensor) -> DTensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def where(mask, a, b) -> DTensor:
    """Select ``a`` where ``mask`` is true, else ``b``; mask is a constant."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"where: incompatible shapes {a.shape} and {b.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)

    def backward(g):
        return np.where(m, g, 0.0), np.where(m, 0.0, g)

    return _result(np.where(m, a.data, b.data), (a, b), backward, "where")


def dropout(a: DTensor, p: float, rng: np.random.Generator | None, training: bool) -> DTensor:
    """Inverted dropout; identity outside training or when ``p`` is 0."""
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions


def sum(a: DTensor, axis=None) -> DTensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: DTensor) -> DTensor:
    n = a.size
    shape = a.shape
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean"
    )


def logsumexp(a: DTensor, axis: int) -> DTensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * w,)

    return _result(out, (a,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: DTensor, shape: Sequence[int]) -> DTensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: DTensor, axes: Sequence[int]) -> DTensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: DTensor) -> DTensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def getitem(a: DTensor, key) -> DTensor:
    shape, dtype = a.shape, a.dtype
    fancy = _has_array_index(key)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _result(np.asarray(a.data[key]), (a,), backward, "getitem")


def concat(tensors: Iterable[DTensor], axis: int = 0) -> DTensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    tensors = [_as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: incompatible shapes {shape} and {t.shape}")

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    out = np.stack([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), backward, "stack")


def embedding(table: DTensor, ids) -> DTensor:
    """Gather rows of a 2-D table; backward scatter-adds into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


def take_last(a: DTensor, idx) -> DTensor:
    """``np.take_along_axis`` on the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        lead = np.indices(idx.shape, sparse=True)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _result(np.take_along_axis(a.data, idx, axis=-1), (a,), backward, "take_last")


def unfold_time(a: DTensor, kernel: int, stride: int) -> DTensor:
    """Windows over axis 1 of a (B, T, D) tensor, zero-padded at the end.

    Output window ``t`` covers input steps ``t*stride .. t*stride+kernel-1``;
    the output length is ``ceil(T / stride)``.
    """
    if a.ndim != 3:
        raise ShapeError(f"unfold_time expects (B, T, D), got {a.shape}")
    b, t, d = a.shape
    t_out = -(-t // stride)
    pos = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    valid = pos < t
    pos_c = np.where(valid, pos, 0)
    win = a.data[:, pos_c, :] * valid[None, :, :, None]
    out = win.reshape(b, t_out, kernel * d)
    dtype = a.dtype

    def backward(g):
        g4 = g.reshape(b, t_out, kernel, d) * valid[None, :, :, None]
        full = np.zeros((b, t, d), dtype=dtype)
        np.add.at(full, (slice(None), pos_c), g4)
        return (full,)

    return _result(out, (a,), backward, "unfold_time")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: DTensor, b: DTensor) -> DTensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across leading axes of ``a``) or carries the
    same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if _needs(a) else None
        gb = None
        if _needs(b):
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x: DTensor, weight: DTensor, bias: DTensor | None = None) -> DTensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (d_out, d_in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[DTensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if _needs(x) else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if _needs(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if _needs(bias) else None

    return _result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation and probabilities


def _bias_array(bias, like: np.ndarray) -> np.ndarray:
    arr = bias.data if isinstance(bias, DTensor) else np.asarray(bias)
    if arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape)
    return arr.astype(like.dtype, copy=False)


def softmax_lastdim(x: DTensor, bias=None) -> DTensor:
    """Softmax over the last axis with an optional additive mask bias.

    Bias entries at or below the ``NEG_INF`` sentinel (or true ``-inf``)
    receive exactly zero weight. A row that is fully masked is an error.
    """
    z = x.data
    parents: tuple[DTensor, ...] = (x,)
    if bias is not None:
        b = _bias_array(bias, z)
        masked = b <= _MASK_THRESHOLD
        if masked.all(axis=-1).any():
            raise ValueError("fully masked attention row")
        z = np.where(masked, -np.inf, z + b)
        if isinstance(bias, DTensor):
            parents = (x, bias)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gx = y * (g - (g * y).sum(axis=-1, keepdims=True))
        return (gx,) if len(parents) == 1 else (gx, gx)

    return _result(y, parents, backward, "softmax")


def log_softmax_lastdim(x: DTensor) -> DTensor:
    z = x.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def layernorm(x: DTensor, gain: DTensor, offset: DTensor, eps: float = 1e-5) -> DTensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layernorm over an empty last dimension")
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError(f"layernorm: gain/offset {gain.shape}/{offset.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = None
        if _needs(x):
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0) if _needs(gain) else None
        goff = g2.sum(axis=0) if _needs(offset) else None
        return gx, ggain, goff

    return _result(xhat * gd + offset.data, (x, gain, offset), backward, "layernorm")


def cross_entropy(logits: DTensor, targets, ignore_id: int | None = None) -> DTensor:
    """Mean negative log-likelihood of ``targets`` over non-ignored positions."""
    t = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    keep = np.ones(t.shape, dtype=bool) if ignore_id is None else t != ignore_id
    if np.any(t[keep] >= v) or np.any(t[keep] < 0):
        raise IndexError(f"target id outside vocabulary of size {v}")
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is ignored")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - m - np.log(s)
    tc = np.where(keep, t, 0)
    picked = np.take_along_axis(logp, tc[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / n

    def backward(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tc[..., None], 1.0, axis=-1)
        return ((p - onehot) * (keep[..., None] * (g / n)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# recurrence


def lstm(gates_x: DTensor, w_hh: DTensor) -> DTensor:
    """Single-direction LSTM recurrence from precomputed input projections.

    ``gates_x`` is (B, T, 4H) holding ``x_t W_ih^T + b`` in gate order
    input, forget, cell, output; ``w_hh`` is (4H, H). Returns all hidden
    states (B, T, H). The backward pass is hand-written BPTT so that a whole
    sequence is one graph node.
    """
    if gates_x.ndim != 3 or w_hh.ndim != 2 or w_hh.shape[0] != gates_x.shape[-1]:
        raise ShapeError(f"lstm: gates {gates_x.shape} do not match recurrent weight {w_hh.shape}")
    b, t_len, four_h = gates_x.shape
    h_dim = four_h // 4
    if w_hh.shape[1] != h_dim:
        raise ShapeError(f"lstm: recurrent weight {w_hh.shape} is not (4H, H)")
    gx, w = gates_x.data, w_hh.data
    dtype = gx.dtype
    h = np.zeros((b, h_dim), dtype=dtype)
    c = np.zeros((b, h_dim), dtype=dtype)
    hs = np.empty((b, t_len, h_dim), dtype=dtype)
    acts = np.empty((t_len, b, four_h), dtype=dtype)
    cs = np.empty((t_len + 1, b, h_dim), dtype=dtype)
    tcs = np.empty((t_len, b, h_dim), dtype=dtype)
    cs[0] = c
    h_prev = np.empty((t_len, b, h_dim), dtype=dtype)
    wt = w.T
    for step in range(t_len):
        h_prev[step] = h
        pre = gx[:, step] + h @ wt
        a = acts[step]
        expit(pre, out=a)
        np.tanh(pre[:, 2 * h_dim : 3 * h_dim], out=a[:, 2 * h_dim : 3 * h_dim])
        i, f, g, o = a[:, :h_dim], a[:, h_dim : 2 * h_dim], a[:, 2 * h_dim : 3 * h_dim], a[:, 3 * h_dim :]
        c = f * c + i * g
        cs[step + 1] = c
        tc = np.tanh(c)
        tcs[step] = tc
        h = o * tc
        hs[:, step] = h

    def backward(grad):
        dgx = np.empty_like(gx)
        dw = np.zeros_like(w)
        dh_next = np.zeros((b, h_dim), dtype=dtype)
        dc_next = np.zeros((b, h_dim), dtype=dtype)
        for step in reversed(range(t_len)):
            a = acts[step]
            i, f, g, o = a[:, :h_dim], a[:, h_dim : 2 * h_dim], a[:, 2 * h_dim : 3 * h_dim], a[:, 3 * h_dim :]
            tc = tcs[step]
            dh = grad[:, step] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dpre = dgx[:, step]
            dpre[:, :h_dim] = dc * g * i * (1.0 - i)
            dpre[:, h_dim : 2 * h_dim] = dc * cs[step] * f * (1.0 - f)
            dpre[:, 2 * h_dim : 3 * h_dim] = dc * i * (1.0 - g * g)
            dpre[:, 3 * h_dim :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dw += dpre.T @ h_prev[step]
            dh_next = dpre @ w
        return dgx, dw

    return _result(hs, (gates_x, w_hh), backward, "lstm")


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam-style moment updates over a mapping of named parameters."""

    def __init__(
        self,
        params: dict[str, DTensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
        lr_scale: dict[str, float] | None = None,
    ):
        self.params = dict(params)
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(np.square(p.grad, dtype=np.float64)))
        return float(np.sqrt(total))

    def step(self) -> None:
        self.step_count += 1
        factor = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / (norm + 1e-12)
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.step_count
        corr2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad * factor
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * self.lr_scale.get(name, 1.0) * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
