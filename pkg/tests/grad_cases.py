"""Finite-difference cases for every differentiable op and two composed graphs.

Each case maps a seed to ``(fn, inputs)``; ``fn`` rebuilds the graph and
returns a scalar (a fixed random projection of the op's output).
"""

from __future__ import annotations

import numpy as np

from mtasr import tensor as T
from mtasr.decoder import CrossAttentionAdapter, Decoder, DecoderConfig, memory_bias
from mtasr.frontend import Encoder, FrontendConfig
from mtasr.lora import attach
from mtasr.nn import BiLSTMLayer, Linear
from mtasr.prompts import assemble
from mtasr.separator import Separator, SeparatorConfig, ctc_nll, serialized_ctc_loss

F64 = np.float64


def leaf(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.sign(x) * (np.abs(x) + low)
    return T.DTensor(x, requires_grad=True)


def projected(out: T.DTensor, rng) -> T.DTensor:
    w = T.DTensor(rng.standard_normal(out.shape))
    return T.sum(T.mul(out, w))


def _unary(op, positive=False, away=None):
    def case(seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 3, 4, low=away)
        if positive:
            x.data = np.abs(x.data) + 0.5
        w = rng.standard_normal((3, 4))
        return (lambda: T.sum(T.mul(op(x), T.DTensor(w)))), [x]

    return case


def _binary(op, shape_b):
    def case(seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 2, 3, 4), leaf(rng, *shape_b)
        w = rng.standard_normal((2, 3, 4))
        return (lambda: T.sum(T.mul(op(a, b), T.DTensor(w)))), [a, b]

    return case


def case_where(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 5), leaf(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.5
    w = rng.standard_normal((3, 5))
    return (lambda: T.sum(T.mul(T.where(mask, a, b), T.DTensor(w)))), [a, b]


def case_dropout(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 4, 6)
    w = rng.standard_normal((4, 6))

    def fn():
        return T.sum(T.mul(T.dropout(x, 0.3, np.random.default_rng(seed), True), T.DTensor(w)))

    return fn, [x]


def case_reductions(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4, 5)
    w1, w2 = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))

    def fn():
        a = T.sum(T.mul(T.sum(x, axis=1), T.DTensor(w1)))
        b = T.sum(T.mul(T.logsumexp(x, axis=0), T.DTensor(w2)))
        return a + b + T.scale(T.mean(x), 3.0)

    return fn, [x]


def case_shapes(seed):
    rng = np.random.default_rng(seed)
    x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 2, 4)

    def fn():
        r = T.reshape(x, (6, 4))
        t = T.transpose(x, (2, 0, 1))
        s = T.swap_last(x)
        c = T.concat([x, y], axis=1)
        st = T.stack([x, x], axis=0)
        g = x[:, 1:, ::2]
        fancy = x[np.array([0, 1, 1]), np.array([2, 0, 2])]
        parts = [r, t, s, c, st, g, fancy]
        total = projected(parts[0], np.random.default_rng(seed))
        for i, p in enumerate(parts[1:], start=1):
            total = total + projected(p, np.random.default_rng([seed, i]))
        return total

    return fn, [x, y]


def case_gathers(seed):
    rng = np.random.default_rng(seed)
    table, x = leaf(rng, 6, 4), leaf(rng, 2, 5, 6)
    ids = rng.integers(0, 6, size=(2, 7))
    idx = rng.integers(0, 6, size=(2, 5, 3))

    def fn():
        e = T.embedding(table, ids)
        tl = T.take_last(x, idx)
        return projected(e, np.random.default_rng(seed)) + projected(tl, np.random.default_rng([seed, 1]))

    return fn, [table, x]


def case_unfold(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 7, 3)
    return (lambda: projected(T.unfold_time(x, 3, 2), np.random.default_rng(seed))), [x]


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b2, b3 = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 2, 4, 2)
    w, bias = leaf(rng, 3, 4), leaf(rng, 3)

    def fn():
        r = np.random.default_rng(seed)
        return projected(a @ b2, r) + projected(a @ b3, r) + projected(T.linear(a, w, bias), r)

    return fn, [a, b2, b3, w, bias]


def case_softmax(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 2, 3, 5)
    bias = np.where(rng.random((3, 5)) < 0.3, T.NEG_INF, 0.0)
    bias[:, 0] = 0.0

    def fn():
        r = np.random.default_rng(seed)
        return projected(T.softmax_lastdim(x, bias), r) + projected(T.log_softmax_lastdim(x), r)

    return fn, [x]


def case_layernorm(seed):
    rng = np.random.default_rng(seed)
    x, g, o = leaf(rng, 3, 4, 6), leaf(rng, 6), leaf(rng, 6)
    return (lambda: projected(T.layernorm(x, g, o), np.random.default_rng(seed))), [x, g, o]


def case_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = leaf(rng, 2, 5, 7)
    targets = rng.integers(0, 7, size=(2, 5))
    targets[0, :2] = -1
    return (lambda: T.cross_entropy(logits, targets, ignore_id=-1)), [logits]


def case_lstm(seed):
    rng = np.random.default_rng(seed)
    gx, w = leaf(rng, 2, 5, 12), leaf(rng, 12, 3)
    gx.data *= 0.7
    return (lambda: projected(T.lstm(gx, w), np.random.default_rng(seed))), [gx, w]


def case_bilstm(seed):
    rng = np.random.default_rng(seed)
    layer = BiLSTMLayer(3, 4, rng, F64)
    x = leaf(rng, 2, 5, 3)
    lengths = np.array([5, 3])
    return (lambda: projected(layer(x, lengths), np.random.default_rng(seed))), [x, layer.forward.recurrent, layer.backward.recurrent]


def case_ctc(seed):
    rng = np.random.default_rng(seed)
    logits = leaf(rng, 3, 6, 4)
    targets = [[1, 2], [3, 3], [2]]
    return (lambda: T.sum(ctc_nll(logits, [6, 5, 4], targets, 0))), [logits]


def case_lora(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(5, 4, rng, dtype=F64)
    slot = attach(lin, 2, 4.0, 0.0, rng)
    slot.B.data = rng.standard_normal(slot.B.shape)
    x = leaf(rng, 3, 5)
    return (lambda: projected(lin(x), np.random.default_rng(seed))), [x, slot.A, slot.B]


def case_gated_adapter(seed):
    rng = np.random.default_rng(seed)
    ad = CrossAttentionAdapter(6, 4, rng, F64)
    ad.gate.data = np.array(rng.normal())
    h, mem = leaf(rng, 2, 3, 6), leaf(rng, 2, 5, 6)
    bias = memory_bias(np.arange(5)[None, :] < np.array([[5], [3]]))

    def fn():
        r = np.random.default_rng(seed)
        return projected(ad(h, mem, bias, "gated"), r) + projected(ad(h, mem, bias, "stacked"), r)

    return fn, [h, mem, ad.gate, ad.q.weight, ad.v.weight]


def case_acoustic_graph(seed):
    """frames -> encoder -> separator -> serialized CTC."""
    rng = np.random.default_rng(seed)
    enc = Encoder(FrontendConfig(frame_dim=3, enc_dim=4, enc_layers=1, model_dim=4), rng, F64)
    sep = Separator(SeparatorConfig(input_dim=4, hidden=4, layers=1, stream_dim=4, max_talkers=2, vocab_size=5), rng, F64)
    frames = leaf(rng, 2, 6, 3)
    lengths = np.array([6, 5])
    talkers = [[[1, 2], [3]], [[4]]]

    def fn():
        h = enc(frames, lengths)
        streams = sep.separate(h, lengths)
        return serialized_ctc_loss([sep.ctc_logits(s) for s in streams], lengths, talkers, 0).total

    return fn, [frames, enc.layers[0].recurrent, sep.heads[1].weight, sep.ctc_head.bias]


def case_decoder_graph(seed):
    """mixed prefix -> decoder with gated adapters -> cross-entropy."""
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(vocab_size=7, layers=1, model_dim=4, heads=2, adapter_dim=3, mlp_dim=5, max_len=16)
    dec = Decoder(cfg, rng, F64)
    dec.insert_adapters("gated", 3, rng)
    hp, mem = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 4)
    layouts = [
        [("hp", 0), ("hp", 1), ("hp", 2), ("tok", 1), ("tok", 5)],
        [("hp", 0), ("hp", 1), ("tok", 1), ("tok", 3), ("tok", 6), ("tok", 2)],
    ]
    labels = np.array([[-1, -1, -1, 5, 2, -1], [-1, -1, 3, 6, 2, 4]])
    bias = memory_bias(np.arange(4)[None, :] < np.array([[4], [2]]))

    def fn():
        x, _ = assemble(layouts, dec.embed, hp, None, 4)
        return T.cross_entropy(dec(x, mem, bias), labels, ignore_id=-1)

    ad = dec.blocks[0].adapter
    return fn, [hp, mem, dec.embed, dec.blocks[0].attn.q.weight, ad.gate, ad.k.weight]


CASES = {
    "add_same": _binary(T.add, (2, 3, 4)),
    "add_row": _binary(T.add, (4,)),
    "add_scalar": _binary(T.add, ()),
    "sub_row": _binary(T.sub, (4,)),
    "mul_same": _binary(T.mul, (2, 3, 4)),
    "mul_row": _binary(T.mul, (4,)),
    "mul_scalar": _binary(T.mul, ()),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "tanh": _unary(T.tanh),
    "sigmoid": _unary(T.sigmoid),
    "relu": _unary(T.relu, away=0.05),
    "where": case_where,
    "dropout": case_dropout,
    "reductions": case_reductions,
    "shapes": case_shapes,
    "gathers": case_gathers,
    "unfold_time": case_unfold,
    "matmul_linear": case_matmul,
    "softmax": case_softmax,
    "layernorm": case_layernorm,
    "cross_entropy": case_cross_entropy,
    "lstm": case_lstm,
    "bilstm": case_bilstm,
    "ctc": case_ctc,
    "lora_linear": case_lora,
    "gated_adapter": case_gated_adapter,
    "encoder_separator_ctc": case_acoustic_graph,
    "prefix_decoder_ce": case_decoder_graph,
}
