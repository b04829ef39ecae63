import logging

import numpy as np
import pytest

from mtasr import tensor as T
from mtasr.decoder import (
    CrossAttentionAdapter,
    Decoder,
    DecoderConfig,
    SelfAttention,
    memory_bias,
)
from mtasr.lora import LoraError, attach, merge, stage_targets
from mtasr.nn import Linear
from mtasr.prompts import PromptError, PromptPlan, assemble, build_prefix, build_sop_tokens, prefix_layout
from mtasr.separator import greedy_decode
from mtasr.tensor import DTensor
from mtasr.vocab import Vocab

F64 = np.float64


def _adapter(rng, dim=8, attn=4, dtype=F64):
    return CrossAttentionAdapter(dim, attn, rng, dtype)


def test_gate_initial_value(rng):
    ad = _adapter(rng)
    assert float(ad.gate.data) == -2.0
    assert abs(float(T.sigmoid(ad.gate).data) - 0.1192) < 1e-4


@pytest.mark.parametrize("gamma", [-2.0, 0.0, 1.3])
def test_gate_algebra(rng, gamma):
    ad = _adapter(rng)
    ad.gate.data = np.array(gamma)
    h, mem = DTensor(rng.standard_normal((2, 3, 8))), DTensor(rng.standard_normal((2, 5, 8)))
    out = ad(h, mem).data
    delta = ad.base(h, mem).data - h.data
    sig = 1.0 / (1.0 + np.exp(-gamma))
    np.testing.assert_allclose(out - h.data, sig * delta, atol=1e-12)


def test_gate_closed(rng):
    ad = _adapter(rng)
    ad.gate.data = np.array(-40.0)
    h, mem = DTensor(rng.standard_normal((3, 8))), DTensor(rng.standard_normal((5, 8)))
    delta = ad.base(h, mem).data - h.data
    assert np.abs(ad(h, mem).data - h.data).max() <= 1e-8 * (1 + np.abs(delta).max())


def test_stacked_is_base_and_not_identity(rng):
    ad = _adapter(rng)
    h, mem = DTensor(rng.standard_normal((3, 8))), DTensor(rng.standard_normal((5, 8)))
    stacked = ad(h, mem, mode="stacked").data
    np.testing.assert_array_equal(stacked, ad.base(h, mem).data)
    assert not np.allclose(stacked, h.data)
    ad.gate.data = np.array(60.0)
    np.testing.assert_allclose(ad(h, mem).data, stacked, atol=1e-12)


def test_monotone_injection(rng):
    ad = _adapter(rng)
    h, mem = DTensor(rng.standard_normal((3, 8))), DTensor(rng.standard_normal((5, 8)))
    norms = []
    for g in np.linspace(-6, 6, 13):
        ad.gate.data = np.array(g)
        norms.append(np.linalg.norm(ad(h, mem).data - h.data))
    assert all(a <= b for a, b in zip(norms, norms[1:]))


def test_memory_mask_zero_weight(rng):
    ad = _adapter(rng)
    valid = np.array([[True, True, False, False, True], [True, False, False, False, False]])
    ad(DTensor(rng.standard_normal((2, 3, 8))), DTensor(rng.standard_normal((2, 5, 8))), memory_bias(valid))
    w = ad.last_weights
    assert np.all(w[~np.broadcast_to(valid[:, None, :], w.shape)] == 0.0)
    with pytest.raises(ValueError):
        memory_bias(np.array([[False, False]]))


def test_self_attention_causal(rng):
    sa = SelfAttention(8, 2, rng, F64)
    x = rng.standard_normal((1, 6, 8))
    base = sa(DTensor(x)).data
    x2 = x.copy()
    x2[0, 4] += 10.0
    moved = sa(DTensor(x2)).data
    np.testing.assert_array_equal(base[0, :4], moved[0, :4])
    assert not np.allclose(base[0, 4:], moved[0, 4:])
    sa(DTensor(rng.standard_normal((1, 1, 8))))
    np.testing.assert_array_equal(sa.last_weights[0, :, 0, 0], 1.0)


def test_decoder_modes(rng):
    cfg = DecoderConfig(vocab_size=11, layers=2, model_dim=8, heads=2, adapter_dim=4, mlp_dim=16)
    dec = Decoder(cfg, rng, F64)
    x = DTensor(rng.standard_normal((2, 5, 8)))
    plain = dec(x).data
    assert plain.shape == (2, 5, 11)
    dec.insert_adapters("gated", 4, rng)
    dec.mode = "none"
    np.testing.assert_array_equal(dec(x).data, plain)
    dec.mode = "gated"
    mem = DTensor(rng.standard_normal((2, 4, 8)))
    assert not np.allclose(dec(x, mem).data, plain)
    with pytest.raises(ValueError):
        DecoderConfig(model_dim=10, heads=4)
    with pytest.raises(ValueError):
        DecoderConfig(adapter_heads=2)


def test_calibration_makes_output_norm_track_residual(rng):
    cfg = DecoderConfig(vocab_size=11, layers=2, model_dim=8, heads=2, adapter_dim=4, mlp_dim=16)
    dec = Decoder(cfg, rng, F64)
    x = DTensor(rng.standard_normal((3, 6, 8)) * 7.0 + 2.0)
    lengths = np.array([6, 4, 5])
    dec.insert_adapters("gated", 4, rng)
    block = dec.blocks[0]
    h = block.attn(DTensor(x.data + dec._positions[:6]))
    valid = np.arange(6)[None, :] < lengths[:, None]
    norm = block.adapter.norm_out
    rows = h.data[valid]
    w = 1.0 / (rows.var(-1, keepdims=True) + norm.eps)

    def cost():
        return float((w * (norm(DTensor(rows)).data - rows) ** 2).sum())

    before = cost()
    dec.calibrate_adapters(x, lengths)
    best = cost()
    assert best < 0.5 * before
    # weighted least squares optimum: nudging any channel's affine only hurts
    for param in (norm.gain, norm.offset):
        for c in range(3):
            for eps in (1e-3, -1e-3):
                param.data[c] += eps
                assert cost() > best
                param.data[c] -= eps
    assert float(block.adapter.gate.data) == -2.0


def test_decoder_dropout_only_in_training(rng):
    cfg = DecoderConfig(vocab_size=11, layers=1, model_dim=8, heads=2, adapter_dim=4, mlp_dim=16, dropout=0.5)
    dec = Decoder(cfg, rng, F64)
    x = DTensor(rng.standard_normal((2, 5, 8)))
    ev = dec(x).data
    np.testing.assert_array_equal(dec(x).data, ev)
    dec.train(np.random.default_rng(0))
    assert not np.allclose(dec(x).data, ev)
    dec.eval()
    np.testing.assert_array_equal(dec(x).data, ev)


# -- LoRA -----------------------------------------------------------------------


def test_lora_zero_init_and_bounds(rng):
    lin = Linear(64, 64, rng, dtype=F64)
    x = DTensor(rng.standard_normal((4, 64)))
    before = lin(x).data
    attach(lin, 16, 32.0, 0.0, rng)
    np.testing.assert_array_equal(lin(x).data, before)
    assert not lin.weight.requires_grad
    with pytest.raises(LoraError):
        attach(Linear(64, 64, rng), 65, 1.0, 0.0, rng)


def test_lora_merge_example(rng):
    lin = Linear(2, 2, rng, bias=False, dtype=F64)
    lin.weight.data = np.eye(2)
    slot = attach(lin, 1, 1.0, 0.0, rng)
    slot.B.data = np.array([[1.0], [0.0]])
    slot.A.data = np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(merge(lin), [[1, 1], [0, 1]])
    np.testing.assert_array_equal(lin(DTensor([1.0, 1.0])).data, [2.0, 1.0])
    with pytest.raises(LoraError):
        merge(lin)


def test_lora_merge_equivalence(rng):
    lin = Linear(12, 7, rng, dtype=F64)
    slot = attach(lin, 3, 4.0, 0.1, rng)
    slot.B.data = rng.standard_normal(slot.B.shape)
    x = DTensor(rng.standard_normal((100, 12)))
    adapter_path = lin(x).data
    merge(lin)
    assert np.abs(lin(x).data - adapter_path).max() <= 1e-10


def test_lora_dropout_only_in_training(rng):
    lin = Linear(6, 6, rng, dtype=F64)
    slot = attach(lin, 2, 2.0, 0.5, rng)
    slot.B.data = rng.standard_normal(slot.B.shape)
    x = DTensor(rng.standard_normal((3, 6)))
    ev = lin(x).data
    lin.train(np.random.default_rng(0))
    assert not np.allclose(lin(x).data, ev)


def test_stage_targets_counts(rng):
    dec = Decoder(DecoderConfig(vocab_size=11, layers=4, model_dim=8, heads=2, adapter_dim=4), rng, F64)
    assert len(stage_targets("stage0", dec)) == 16
    with pytest.raises(LoraError):
        stage_targets("stage2", dec)
    dec.insert_adapters("gated", 4, rng)
    assert len(stage_targets("stage2", dec)) == 32
    assert len(stage_targets("stage2", dec, ca_only=True)) == 16
    with pytest.raises(LoraError):
        stage_targets("stage9", dec)


# -- prompts ----------------------------------------------------------------------


def _parts(d=4, **lengths):
    return {k: DTensor(np.zeros((n, d))) for k, n in lengths.items()}


def test_prefix_lengths():
    assert PromptPlan("sot_baseline").prefix_length(t_d=10, t_t=4) == 14
    assert PromptPlan("hybrid").prefix_length(t_sop=6, t_d=10, t_t=4) == 20
    assert build_prefix(PromptPlan("hybrid"), _parts(E_tok=6, H_p=10, E_t=4)).shape == (20, 4)
    assert build_prefix(PromptPlan("acoustic"), _parts(E_aco=9, E_t=4)).shape == (13, 4)


def test_prefix_order():
    parts = {"E_tok": DTensor(np.full((2, 1), 1.0)), "H_p": DTensor(np.full((3, 1), 2.0)), "E_t": DTensor(np.full((1, 1), 3.0))}
    out = build_prefix(PromptPlan("hybrid"), parts).data[:, 0]
    np.testing.assert_array_equal(out, [1, 1, 2, 2, 2, 3])


def test_prefix_missing_part():
    with pytest.raises(PromptError, match="hybrid.*H_p"):
        build_prefix(PromptPlan("hybrid"), _parts(E_tok=2, E_t=1))


def test_token_prompt_empty_decode_warns(caplog):
    empty = greedy_decode(np.eye(4)[[0, 0, 0]], 0)
    parts = {"E_tok": DTensor(np.zeros((len(empty), 4))), "E_t": DTensor(np.ones((3, 4)))}
    with caplog.at_level(logging.WARNING):
        out = build_prefix(PromptPlan("token"), parts)
    assert out.shape == (3, 4)
    assert "empty CTC decode" in caplog.text


def test_instruct_wrapping():
    v = Vocab()
    plan = PromptPlan("sot_baseline", use_instruct=True)
    lay = prefix_layout(plan, v, t_d=3)
    ids = v.instruct_ids
    assert lay[0] == ("tok", ids["bos_prompt"]) and lay[-1] == ("tok", ids["eos_speech"])
    assert len(lay) == plan.prefix_length(t_inst=len(v.instruction), t_d=3)


def test_sop_tokens():
    assert build_sop_tokens([[5, 6], [7]]) == [5, 6, 7]
    assert build_sop_tokens([[], []]) == []
    z = [np.eye(5)[[1, 1, 0, 2]], np.eye(5)[[0, 3, 0, 0]], np.eye(5)[[4, 0, 4, 4]]]
    assert build_sop_tokens([greedy_decode(x, 0) for x in z]) == [1, 2, 3, 4, 4]


def test_assemble_mixed_rows(rng):
    table = DTensor(rng.standard_normal((6, 3)))
    hp = DTensor(rng.standard_normal((2, 4, 3)))
    layouts = [[("hp", 0), ("tok", 2)], [("tok", 5), ("hp", 3), ("hp", 1)]]
    x, lengths = assemble(layouts, table, hp, None, pad_id=0)
    np.testing.assert_array_equal(lengths, [2, 3])
    np.testing.assert_array_equal(x.data[0, 0], hp.data[0, 0])
    np.testing.assert_array_equal(x.data[0, 1], table.data[2])
    np.testing.assert_array_equal(x.data[1, 1], hp.data[1, 3])
    np.testing.assert_array_equal(x.data[0, 2], table.data[0])


@pytest.mark.parametrize("variant", ["sot_baseline", "token", "hybrid", "acoustic"])
def test_prefix_length_property(rng, variant):
    plan = PromptPlan(variant, use_instruct=bool(rng.integers(2)))
    for _ in range(20):
        n = dict(E_inst=int(rng.integers(1, 5)), E_tok=int(rng.integers(1, 6)), H_p=int(rng.integers(1, 6)),
                 E_aco=int(rng.integers(1, 9)), E_t=int(rng.integers(1, 6)))
        boundary = {k: DTensor(np.zeros((1, 2))) for k in ("bos_prompt", "eos_prompt", "bos_speech", "eos_speech")}
        out = build_prefix(plan, {k: DTensor(np.zeros((v, 2))) for k, v in n.items()}, boundary)
        want = plan.prefix_length(t_inst=n["E_inst"], t_sop=n["E_tok"], t_d=n["H_p"], t_m=n["E_aco"], t_t=n["E_t"])
        assert out.shape[0] == want
