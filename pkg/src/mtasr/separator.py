"""Recurrent talker separator, serialized CTC supervision, greedy CTC decoding."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import BiLSTMLayer, LayerNorm, Linear, LSTMLayer, Module, drop, zero_padded
from .tensor import NEG_INF, DTensor


class CTCError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    input_dim: int = 64
    hidden: int = 64
    layers: int = 2
    stream_dim: int = 64
    max_talkers: int = 3
    vocab_size: int = 43
    bidirectional: bool = False
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class Separator(Module):
    """Shared recurrence and layer norm, one ReLU linear head per talker, shared CTC head."""

    def __init__(self, cfg: SeparatorConfig, rng, dtype=np.float64):
        if cfg.max_talkers < 1:
            raise ValueError("max_talkers must be at least 1")
        layer = BiLSTMLayer if cfg.bidirectional else LSTMLayer
        self.bidirectional = cfg.bidirectional
        self.dropout = cfg.dropout
        self.layers = [layer(cfg.input_dim if i == 0 else cfg.hidden, cfg.hidden, rng, dtype) for i in range(cfg.layers)]
        self.norm = LayerNorm(cfg.hidden, dtype)
        self.heads = [Linear(cfg.hidden, cfg.stream_dim, rng, dtype=dtype) for _ in range(cfg.max_talkers)]
        self.ctc_head = Linear(cfg.stream_dim, cfg.vocab_size, rng, dtype=dtype)

    @property
    def max_talkers(self) -> int:
        return len(self.heads)

    def separate(self, h: DTensor, lengths=None, num_streams: int | None = None) -> list[DTensor]:
        """Talker streams aligned in time with ``h``; (T, D) or (B, T, D) input."""
        if h.ndim == 2:
            return [s[0] for s in self.separate(T.reshape(h, (1, *h.shape)), None, num_streams)]
        u = h
        for layer in self.layers:
            u = drop(self, layer(u, lengths) if self.bidirectional else layer(u), self.dropout)
        u = self.norm(u)
        k = self.max_talkers if num_streams is None else num_streams
        streams = [T.relu(head(u)) for head in self.heads[:k]]
        if lengths is not None:
            streams = [zero_padded(s, lengths) for s in streams]
        return streams

    def ctc_logits(self, stream: DTensor) -> DTensor:
        return self.ctc_head(stream)


# ---------------------------------------------------------------------------
# CTC


def min_frames(target) -> int:
    """Fewest frames that can emit ``target``: one per token plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_nll(logits: DTensor, lengths, targets, blank_id: int) -> DTensor:
    """Per-sequence CTC negative log-likelihood, shape (B,).

    Log-space forward recursion over the blank-interleaved target; the
    gradient comes from differentiating the recursion itself.
    """
    b, t_max, _ = logits.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    targets = [list(t) for t in targets]
    if len(targets) != b or lengths.shape != (b,):
        raise CTCError("one target and one length per sequence are required")
    for i, (tgt, n) in enumerate(zip(targets, lengths)):
        if blank_id in tgt:
            raise CTCError(f"sequence {i}: target contains the blank id")
        if n < 1 or n > t_max:
            raise CTCError(f"sequence {i}: length {n} outside [1, {t_max}]")
        if n < min_frames(tgt):
            raise CTCError(f"sequence {i}: target unalignable ({len(tgt)} tokens in {n} frames)")
    s_max = 2 * max(len(t) for t in targets) + 1
    ext = np.full((b, s_max), blank_id, dtype=np.int64)
    for i, tgt in enumerate(targets):
        ext[i, 1 : 2 * len(tgt) : 2] = tgt
    ext_len = np.array([2 * len(t) + 1 for t in targets])
    s_idx = np.arange(s_max)[None, :]
    skip_ok = (s_idx >= 2) & (ext != blank_id)
    skip_ok[:, 2:] &= ext[:, 2:] != ext[:, :-2]
    dtype = logits.dtype
    skip_bias = DTensor(np.where(skip_ok, 0.0, NEG_INF).astype(dtype))
    fill1 = DTensor(np.full((b, 1), NEG_INF, dtype=dtype))
    fill2 = DTensor(np.full((b, 2), NEG_INF, dtype=dtype))

    logp = T.log_softmax_lastdim(logits)
    emit = T.take_last(logp, np.broadcast_to(ext[:, None, :], (b, t_max, s_max)))
    start = DTensor(np.where(s_idx < 2, 0.0, NEG_INF).astype(dtype) * np.ones((b, 1), dtype=dtype))
    alpha = emit[:, 0] + start
    for t in range(1, t_max):
        stay = alpha
        step = T.concat([fill1, alpha[:, :-1]], axis=1)
        skip = T.concat([fill2, alpha[:, :-2]], axis=1) + skip_bias if s_max > 2 else None
        paths = [stay, step] if skip is None else [stay, step, skip]
        new = T.logsumexp(T.stack(paths, axis=0), axis=0) + emit[:, t]
        active = t < lengths
        alpha = new if active.all() else T.where(active[:, None], new, alpha)
    padded = T.concat([alpha, fill1], axis=1)
    last = np.stack([ext_len - 1, np.where(ext_len >= 2, ext_len - 2, s_max)], axis=1)
    return -T.logsumexp(T.take_last(padded, last), axis=1)


def ctc_loss(logits: DTensor, target, blank_id: int) -> DTensor:
    """CTC negative log-likelihood of one (T, V) logit matrix; scalar."""
    batched = T.reshape(logits, (1, *logits.shape))
    return T.reshape(ctc_nll(batched, [logits.shape[0]], [list(target)], blank_id), ())


@dataclass
class SerCtcLossParts:
    branches: list[DTensor]
    total: DTensor
    alpha: float | None = None
    counts: list[int] = field(default_factory=list)

    @property
    def branch_values(self) -> list[float]:
        return [float(b.data) for b in self.branches]


def serialized_ctc_loss(stream_logits, lengths, talker_targets, blank_id: int) -> SerCtcLossParts:
    """Sum over branches of CTC(branch k, k-th onset-ordered talker).

    ``stream_logits`` is a list of (B, T, V) tensors, one per branch;
    ``talker_targets[b]`` lists sample b's talker sequences in onset order.
    Each branch term is averaged over the samples that have a k-th talker.
    Branches without a paired talker contribute nothing.
    """
    lengths = np.asarray(lengths)
    k_max = max(len(t) for t in talker_targets)
    if len(stream_logits) < k_max:
        raise CTCError(f"{len(stream_logits)} branches for {k_max} talkers")
    branches, counts = [], []
    b = len(talker_targets)
    for k in range(k_max):
        rows = [i for i in range(b) if len(talker_targets[i]) > k]
        logits = stream_logits[k] if len(rows) == b else stream_logits[k][np.array(rows)]
        try:
            nll = ctc_nll(logits, lengths[rows], [talker_targets[i][k] for i in rows], blank_id)
        except CTCError as exc:
            raise CTCError(f"branch {k}: {exc}") from exc
        branches.append(T.scale(T.sum(nll), 1.0 / len(rows)))
        counts.append(len(rows))
    total = branches[0]
    for extra in branches[1:]:
        total = total + extra
    return SerCtcLossParts(branches, total, counts=counts)


def greedy_decode(logits, blank_id: int, length: int | None = None) -> list[int]:
    """Frame-wise argmax (lowest id wins ties), collapse repeats, drop blanks."""
    z = logits.data if isinstance(logits, DTensor) else np.asarray(logits)
    if length is not None:
        z = z[:length]
    best = np.argmax(z, axis=-1)
    out: list[int] = []
    prev = None
    for tok in best.tolist():
        if tok != prev and tok != blank_id:
            out.append(tok)
        prev = tok
    return out


def joint_loss(serctc, sot, alpha: float):
    """``alpha * serctc + (1 - alpha) * sot`` for floats or scalar tensors."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(serctc, DTensor) or isinstance(sot, DTensor):
        return T.scale(T._as_tensor(serctc), alpha) + T.scale(T._as_tensor(sot), 1.0 - alpha)
    return alpha * serctc + (1.0 - alpha) * sot
