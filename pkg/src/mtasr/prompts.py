"""Decoder prefix contexts for the SOT baseline and the CTC-derived prompt variants."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DTensor
from .vocab import Vocab

log = logging.getLogger(__name__)

VARIANTS = ("sot_baseline", "token", "hybrid", "acoustic")

# (required parts) per variant, in prompt order
_PROMPT_PARTS = {
    "sot_baseline": ("H_p",),
    "token": ("E_tok",),
    "hybrid": ("E_tok", "H_p"),
    "acoustic": ("E_aco",),
}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPlan:
    variant: str = "sot_baseline"
    use_instruct: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PromptError(f"prompt variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def prompt_parts(self) -> tuple[str, ...]:
        return _PROMPT_PARTS[self.variant]

    @property
    def uses_separator(self) -> bool:
        return self.variant != "sot_baseline"

    def segment_lengths(self, *, t_inst: int = 0, t_sop: int = 0, t_d: int = 0, t_m: int = 0, t_t: int = 0):
        """Lengths of (instruction, token prompt, acoustic prompt, text); wrappers excluded."""
        inst = t_inst if self.use_instruct else 0
        sop = t_sop if "E_tok" in self.prompt_parts else 0
        if "H_p" in self.prompt_parts:
            aco = t_d
        elif "E_aco" in self.prompt_parts:
            aco = t_m
        else:
            aco = 0
        return inst, sop, aco, t_t

    def prefix_length(self, **lengths) -> int:
        total = sum(self.segment_lengths(**lengths))
        return total + (4 if self.use_instruct else 0)


def build_sop_tokens(decodes) -> list[int]:
    """Concatenate per-branch greedy decodes in branch order, no separator."""
    out: list[int] = []
    for seq in decodes:
        out.extend(int(t) for t in seq)
    return out


def build_prefix(plan: PromptPlan, parts: dict, boundary: dict | None = None) -> DTensor:
    """Concatenate ``[E_inst?, prompt segment, E_t]`` along the time axis.

    ``parts`` maps part names (``E_inst``, ``E_tok``, ``H_p``, ``E_aco``,
    ``E_t``) to (n, D) tensors. With ``plan.use_instruct`` the segments are
    wrapped by the boundary embeddings in ``boundary`` (keyed by token name,
    each (1, D)).
    """
    required = ("E_t", *plan.prompt_parts) + (("E_inst",) if plan.use_instruct else ())
    for name in required:
        if parts.get(name) is None:
            raise PromptError(f"variant {plan.variant!r} requires part {name!r}")
    prompt = [parts[name] for name in plan.prompt_parts if parts[name].shape[0] > 0]
    if "E_tok" in plan.prompt_parts and parts["E_tok"].shape[0] == 0:
        log.warning("empty CTC decode: %s prompt has no token segment", plan.variant)
    text = parts["E_t"]
    if not plan.use_instruct:
        return T.concat([*prompt, text], axis=0)
    if boundary is None:
        raise PromptError("instruct prompts need boundary token embeddings")
    pieces = [
        boundary["bos_prompt"], parts["E_inst"], boundary["eos_prompt"],
        boundary["bos_speech"], *prompt, boundary["eos_speech"],
        text,
    ]
    return T.concat([p for p in pieces if p.shape[0] > 0], axis=0)


# ---------------------------------------------------------------------------
# batched assembly
#
# A layout is a list of (source, index) pairs: ("tok", token_id) rows come
# from the embedding table, ("hp", t) and ("aco", t) rows from the sample's
# projected mixture or separated-stream features.


def text_tokens(plan: PromptPlan, vocab: Vocab, target) -> tuple[list[int], list[int]]:
    """Teacher-forcing inputs and labels for a target sequence."""
    start = vocab.instruct_ids["bos_response"] if plan.use_instruct else vocab.bos_id
    end = vocab.instruct_ids["eos_response"] if plan.use_instruct else vocab.eos_id
    target = [int(t) for t in target]
    return [start, *target], [*target, end]


def end_token(plan: PromptPlan, vocab: Vocab) -> int:
    return vocab.instruct_ids["eos_response"] if plan.use_instruct else vocab.eos_id


def prefix_layout(plan: PromptPlan, vocab: Vocab, *, sop_tokens=(), t_d: int = 0, aco_rows=()):
    """Layout of everything before the text segment.

    ``aco_rows`` lists the rows of the sample's separated-stream features
    that make up the acoustic prompt, in order.
    """
    prompt = []
    for part in plan.prompt_parts:
        if part == "E_tok":
            prompt += [("tok", int(t)) for t in sop_tokens]
        elif part == "H_p":
            prompt += [("hp", t) for t in range(t_d)]
        else:
            prompt += [("aco", int(t)) for t in aco_rows]
    if not plan.use_instruct:
        return prompt
    ids = vocab.instruct_ids
    inst = [("tok", ids["bos_prompt"]), *[("tok", t) for t in vocab.instruction_ids], ("tok", ids["eos_prompt"])]
    return [*inst, ("tok", ids["bos_speech"]), *prompt, ("tok", ids["eos_speech"])]


def assemble(layouts, table: DTensor, hp: DTensor | None = None, aco: DTensor | None = None, pad_id: int = 0):
    """Stack per-sample layouts into a right-padded (B, L, D) input.

    ``hp`` and ``aco`` are (B, T, D) feature tensors indexed by the layouts.
    Returns the input tensor and the per-sample lengths.
    """
    b = len(layouts)
    lengths = np.array([len(lay) for lay in layouts])
    width = int(lengths.max())
    dim = table.shape[1]
    tok = np.full((b, width), pad_id, dtype=np.int64)
    is_tok = np.ones((b, width), dtype=bool)
    sources = [(name, src) for name, src in (("hp", hp), ("aco", aco)) if src is not None]
    offsets, total = {}, 0
    for name, src in sources:
        offsets[name] = (total, src.shape[1])
        total += src.shape[0] * src.shape[1]
    cont = np.full((b, width), total, dtype=np.int64)
    for i, lay in enumerate(layouts):
        for j, (kind, idx) in enumerate(lay):
            if kind == "tok":
                tok[i, j] = idx
            else:
                is_tok[i, j] = False
                base, per = offsets[kind]
                cont[i, j] = base + i * per + idx
    x = T.embedding(table, tok)
    if is_tok.all():
        return x, lengths
    flat = [T.reshape(src, (-1, dim)) for _, src in sources]
    flat.append(DTensor(np.zeros((1, dim), dtype=table.dtype)))
    rows = T.embedding(T.concat(flat, axis=0), cont)
    return T.where(is_tok[:, :, None], x, rows), lengths
