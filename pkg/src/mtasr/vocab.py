"""Vocabulary with reserved special tokens, and serialized-output targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from collections.abc import Sequence

INSTRUCT_TOKENS = (
    "sc",
    "pad",
    "bos_prompt",
    "eos_prompt",
    "bos_speech",
    "eos_speech",
    "bos_response",
    "eos_response",
)

# Fixed stand-in for the system instruction, as content-token offsets.
DEFAULT_INSTRUCTION = (0, 1, 2, 3, 4, 5, 6)


class SerializationError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Token id layout: blank, bos, eos, the eight instruct-style tokens, content.

    The instruct-style tokens (including ``sc`` and ``pad``) are always
    allocated so checkpoints share one layout whether or not a run wraps its
    prompt with them.
    """

    content_size: int = 32
    instruction: tuple[int, ...] = DEFAULT_INSTRUCTION
    blank_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    instruct_ids: dict[str, int] = field(
        default_factory=lambda: {name: 3 + i for i, name in enumerate(INSTRUCT_TOKENS)}
    )

    def __post_init__(self):
        special = [self.blank_id, self.bos_id, self.eos_id, *self.instruct_ids.values()]
        if len(set(special)) != len(special):
            raise ValueError("special token ids must be distinct")
        if set(self.instruct_ids) != set(INSTRUCT_TOKENS):
            raise ValueError(f"instruct_ids must name exactly {INSTRUCT_TOKENS}")
        if max(special) >= self.size:
            raise ValueError("special token id outside the vocabulary")
        if self.content_size < 1:
            raise ValueError("content_size must be positive")
        if any(not 0 <= i < self.content_size for i in self.instruction):
            raise ValueError("instruction offsets must index content tokens")

    @property
    def num_special(self) -> int:
        return 3 + len(INSTRUCT_TOKENS)

    @property
    def size(self) -> int:
        return self.num_special + self.content_size

    @property
    def sc_id(self) -> int:
        return self.instruct_ids["sc"]

    @property
    def pad_id(self) -> int:
        return self.instruct_ids["pad"]

    @property
    def content_offset(self) -> int:
        return self.num_special

    @property
    def content_ids(self) -> range:
        return range(self.content_offset, self.size)

    @property
    def instruction_ids(self) -> list[int]:
        return [self.content_offset + i for i in self.instruction]

    def is_content(self, token: int) -> bool:
        return self.content_offset <= token < self.size

    def to_dict(self) -> dict:
        return {
            "content_size": self.content_size,
            "instruction": list(self.instruction),
            "blank_id": self.blank_id,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "instruct_ids": dict(self.instruct_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Vocab:
        return cls(
            content_size=d["content_size"],
            instruction=tuple(d["instruction"]),
            blank_id=d["blank_id"],
            bos_id=d["bos_id"],
            eos_id=d["eos_id"],
            instruct_ids=dict(d["instruct_ids"]),
        )


@dataclass(frozen=True)
class TalkerRefs:
    """Per-talker reference token sequences with onset frames."""

    tokens: tuple[tuple[int, ...], ...]
    onsets: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.onsets):
            raise ValueError("one onset per talker is required")
        if any(o < 0 for o in self.onsets):
            raise ValueError("onsets must be nonnegative")

    @classmethod
    def of(cls, tokens: Sequence[Sequence[int]], onsets: Sequence[int]) -> TalkerRefs:
        return cls(tuple(tuple(int(x) for x in t) for t in tokens), tuple(int(o) for o in onsets))

    @property
    def num_talkers(self) -> int:
        return len(self.tokens)

    def onset_order(self) -> list[int]:
        if len(set(self.onsets)) != len(self.onsets):
            raise SerializationError("ambiguous serialization order: duplicate onsets")
        return sorted(range(len(self.onsets)), key=lambda k: self.onsets[k])

    def ordered(self) -> list[list[int]]:
        """Talker sequences sorted by onset."""
        return [list(self.tokens[k]) for k in self.onset_order()]

    def validate(self, vocab: Vocab) -> None:
        banned = {vocab.sc_id, vocab.blank_id, vocab.pad_id}
        for k, seq in enumerate(self.tokens):
            bad = banned.intersection(seq)
            if bad:
                raise SerializationError(f"talker {k} reference contains reserved ids {sorted(bad)}")


def build_sot_target(refs: TalkerRefs, vocab: Vocab) -> list[int]:
    """Onset-ordered talker sequences joined by the speaker-change token."""
    if refs.num_talkers == 0:
        raise SerializationError("at least one talker is required")
    refs.validate(vocab)
    out: list[int] = []
    for i, seq in enumerate(refs.ordered()):
        if i:
            out.append(vocab.sc_id)
        out.extend(seq)
    return out


def split_sot(seq: Sequence[int], vocab: Vocab) -> list[list[int]]:
    """Split a serialized sequence on the speaker-change token."""
    parts: list[list[int]] = [[]]
    for tok in seq:
        if tok == vocab.sc_id:
            parts.append([])
        else:
            parts[-1].append(int(tok))
    return parts
