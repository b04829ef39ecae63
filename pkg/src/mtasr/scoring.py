"""Token-level WER with serialized-output-aware splitting."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .vocab import TalkerRefs, Vocab, build_sot_target, split_sot

SCORING_MODES = ("concatenated", "per_talker")


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> tuple[int, int, int]:
    """Minimal (substitutions, deletions, insertions) turning ``ref`` into ``hyp``.

    Among minimal alignments the backtrace prefers the diagonal step, then
    deletion, then insertion, so a substitution always wins over an
    insertion/deletion pair.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), dl, ins


@dataclass(frozen=True)
class SampleScore:
    sub: int
    dele: int
    ins: int
    n_ref: int

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins


def _strip(seq, vocab: Vocab):
    return [int(t) for t in seq if t != vocab.sc_id]


def score_sot(
    refs: TalkerRefs, hyp: Sequence[int], vocab: Vocab, mode: str = "concatenated", strip_sc: bool = True
) -> SampleScore:
    """Edit counts of a serialized hypothesis against the onset-ordered references.

    ``per_talker`` pairs the i-th hypothesis segment with the i-th reference
    talker; missing segments count as deletions, surplus ones as insertions.
    """
    if mode not in SCORING_MODES:
        raise ValueError(f"mode must be one of {SCORING_MODES}")
    if mode == "concatenated":
        ref_seq = build_sot_target(refs, vocab)
        if strip_sc:
            ref_seq, hyp = _strip(ref_seq, vocab), _strip(hyp, vocab)
        s, d, i = edit_distance(ref_seq, list(hyp))
        return SampleScore(s, d, i, len(ref_seq))
    ref_parts = refs.ordered()
    hyp_parts = split_sot(hyp, vocab)
    if hyp_parts == [[]]:
        hyp_parts = []
    s = d = i = 0
    for k in range(max(len(ref_parts), len(hyp_parts))):
        r = ref_parts[k] if k < len(ref_parts) else []
        h = hyp_parts[k] if k < len(hyp_parts) else []
        ds, dd, di = edit_distance(r, h)
        s, d, i = s + ds, d + dd, i + di
    return SampleScore(s, d, i, sum(len(r) for r in ref_parts))


@dataclass
class WerReport:
    """Per-sample edit counts grouped by (K, condition, split) for one system."""

    system: str
    samples: dict[tuple, list[tuple[int, SampleScore]]] = field(default_factory=dict)

    def add(self, key: tuple, sample_id: int, score: SampleScore) -> None:
        self.samples.setdefault(tuple(key), []).append((sample_id, score))

    def totals(self, key: tuple) -> SampleScore:
        rows = [sc for _, sc in self.samples[tuple(key)]]
        return SampleScore(
            sum(r.sub for r in rows), sum(r.dele for r in rows), sum(r.ins for r in rows), sum(r.n_ref for r in rows)
        )

    def wer(self, key: tuple) -> float:
        tot = self.totals(key)
        if tot.n_ref <= 0:
            raise ValueError(f"no reference tokens for {key}")
        return tot.errors / tot.n_ref


def corpus_wer(scores: Sequence[SampleScore]) -> float:
    """Pooled WER in percent."""
    n = sum(s.n_ref for s in scores)
    if n <= 0:
        raise ValueError("no reference tokens to score")
    return 100.0 * sum(s.errors for s in scores) / n
