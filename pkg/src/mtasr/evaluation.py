"""Batched decoding and scoring of a model over a list of samples."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import Batch, FeatureCache, ModelBundle
from .scoring import SampleScore, corpus_wer, score_sot

DECODE_SYSTEMS = ("decoder", "ctc")


def batches(samples, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def needs_streams(model: ModelBundle) -> bool:
    return model.plan.uses_separator or (model.decoder.mode != "none" and model.cfg.memory_source == "separated")


def needs_sop(model: ModelBundle) -> bool:
    return "E_tok" in model.plan.prompt_parts


def ctc_hypothesis(decodes, sc_id: int) -> list[int]:
    """Branch decodes joined by the speaker-change token, empty branches skipped."""
    out: list[int] = []
    for seq in decodes:
        if not seq:
            continue
        if out:
            out.append(sc_id)
        out.extend(seq)
    return out


def output_budget(frame_lengths) -> np.ndarray:
    """Per-sample cap on generated tokens, from the input length alone."""
    return np.asarray(frame_lengths, dtype=np.int64) + 8


def decode(
    model: ModelBundle, samples, system: str = "decoder", batch_size: int = 64, cache: FeatureCache | None = None
) -> list[list[int]]:
    """Greedy hypotheses for every sample, in input order."""
    if system not in DECODE_SYSTEMS:
        raise ValueError(f"system must be one of {DECODE_SYSTEMS}")
    was_training, rng = model.training, model._rng
    model.eval()
    hyps: list[list[int]] = []
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            batch = Batch.from_samples(chunk, model.dtype)
            if system == "ctc":
                feats = cache.features(batch) if cache is not None else model.features(batch)
                if feats.streams is None:
                    model.add_streams(feats)
                hyps += [ctc_hypothesis(d, model.vocab.sc_id) for d in model.ctc_decodes(feats)]
                continue
            if cache is not None:
                feats = cache.features(batch)
            else:
                feats = model.features(batch, with_streams=needs_streams(model), with_sop=needs_sop(model))
            hyps += model.generate(feats, max_new=output_budget(batch.lengths))
    if was_training:
        model.train(rng)
    return hyps


def score_all(samples, hyps, vocab, mode: str = "concatenated", strip_sc: bool = True) -> list[SampleScore]:
    return [score_sot(s.refs, h, vocab, mode, strip_sc) for s, h in zip(samples, hyps)]


def token_wer(model: ModelBundle, samples, system: str = "decoder", mode: str = "concatenated", **kw) -> float:
    hyps = decode(model, samples, system, **kw)
    return corpus_wer(score_all(samples, hyps, model.vocab, mode))
