"""Deterministic synthetic multi-talker mixtures and their on-disk format.

Each content token owns a fixed unit-norm codebook vector. A talker's
utterance is rendered by repeating each token's vector for
``frames_per_token`` frames starting at the talker's onset; talkers are
summed where they overlap and Gaussian noise is added for the noisy
condition.

File layout: one JSON header line, then for every sample a little-endian
record ``u32 meta_len | meta JSON | u32 T | u32 D | T*D float32``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .vocab import TalkerRefs, Vocab, build_sot_target

FORMAT_NAME = "mtasr-mixtures"
FORMAT_VERSION = 1
_CODEBOOK_STREAM = 0x5EED_C0DE
# Splits share one seed and codebook; they draw from disjoint index ranges.
SPLIT_OFFSETS = {"train": 0, "dev": 1_000_000, "test": 2_000_000}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GenSpec:
    num_talkers: int = 2
    content_size: int = 32
    min_len: int = 3
    max_len: int = 8
    frames_per_token: int = 4
    frame_dim: int = 16
    onset_jitter: tuple[int, int] = (2, 12)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_talkers < 1:
            raise ValueError("num_talkers must be at least 1")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.frames_per_token < 2:
            raise ValueError("frames_per_token must be at least 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        lo, hi = self.onset_jitter
        if lo < 1 or hi < lo:
            raise ValueError("onset_jitter must satisfy 1 <= lo <= hi")

    @property
    def condition(self) -> str:
        return "noisy" if self.noise_std > 0 else "clean"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["onset_jitter"] = list(self.onset_jitter)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GenSpec:
        d = dict(d)
        d["onset_jitter"] = tuple(d["onset_jitter"])
        return cls(**d)


@dataclass
class MixtureSample:
    sample_id: int
    refs: TalkerRefs
    frames: np.ndarray
    sot_target: list[int]
    condition: str

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_talkers(self) -> int:
        return self.refs.num_talkers

    def __eq__(self, other) -> bool:
        if not isinstance(other, MixtureSample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.refs == other.refs
            and self.sot_target == other.sot_target
            and self.condition == other.condition
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames, other.frames)
        )


@dataclass
class MixtureDataset:
    spec: GenSpec
    vocab: Vocab
    samples: list[MixtureSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def make_codebook(spec: GenSpec) -> np.ndarray:
    """Unit-norm row per content token, drawn once from the dataset seed."""
    rng = np.random.default_rng([spec.seed, _CODEBOOK_STREAM])
    book = rng.standard_normal((spec.content_size, spec.frame_dim))
    book /= np.linalg.norm(book, axis=1, keepdims=True)
    return book


def codebook_checksum(codebook: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(codebook, dtype="<f4").tobytes()).hexdigest()


def render_talker(tokens, onset: int, codebook: np.ndarray, vocab: Vocab, frames_per_token: int, length: int):
    out = np.zeros((length, codebook.shape[1]))
    for j, tok in enumerate(tokens):
        start = onset + j * frames_per_token
        out[start : start + frames_per_token] = codebook[tok - vocab.content_offset]
    return out


def render_refs(
    refs: TalkerRefs,
    codebook: np.ndarray,
    vocab: Vocab,
    frames_per_token: int,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sum of per-talker renders plus optional noise, as float32 frames."""
    length = max(o + len(t) * frames_per_token for t, o in zip(refs.tokens, refs.onsets))
    mix = np.zeros((length, codebook.shape[1]))
    for tokens, onset in zip(refs.tokens, refs.onsets):
        mix += render_talker(tokens, onset, codebook, vocab, frames_per_token, length)
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise requires a random generator")
        mix += noise_std * rng.standard_normal(mix.shape)
    return mix.astype(np.float32)


def render_sample(
    spec: GenSpec, index: int, vocab: Vocab | None = None, codebook: np.ndarray | None = None
) -> MixtureSample:
    """Sample ``index`` of the stream defined by ``spec``; pure in (spec, index)."""
    vocab = vocab or Vocab(content_size=spec.content_size)
    codebook = make_codebook(spec) if codebook is None else codebook
    rng = np.random.default_rng([spec.seed, index])
    tokens, onsets = [], []
    onset = 0
    lo, hi = spec.onset_jitter
    for k in range(spec.num_talkers):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        tokens.append(rng.integers(0, spec.content_size, size=n) + vocab.content_offset)
        if k:
            onset += int(rng.integers(lo, hi + 1))
        onsets.append(onset)
    refs = TalkerRefs.of(tokens, onsets)
    frames = render_refs(refs, codebook, vocab, spec.frames_per_token, spec.noise_std, rng)
    return MixtureSample(index, refs, frames, build_sot_target(refs, vocab), spec.condition)


def generate(spec: GenSpec, n: int, start: int = 0, vocab: Vocab | None = None) -> MixtureDataset:
    vocab = vocab or Vocab(content_size=spec.content_size)
    book = make_codebook(spec)
    samples = [render_sample(spec, start + i, vocab, book) for i in range(n)]
    return MixtureDataset(spec, vocab, samples)


def generate_split(spec: GenSpec, split: str, n: int, vocab: Vocab | None = None) -> MixtureDataset:
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"split must be one of {tuple(SPLIT_OFFSETS)}")
    return generate(spec, n, SPLIT_OFFSETS[split], vocab)


# ---------------------------------------------------------------------------
# persistence


def write_dataset(dataset: MixtureDataset, path) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "genspec": dataset.spec.to_dict(),
        "vocab": dataset.vocab.to_dict(),
        "codebook_sha256": codebook_checksum(make_codebook(dataset.spec)),
        "num_samples": len(dataset.samples),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for s in dataset.samples:
            meta = {
                "id": s.sample_id,
                "tokens": [list(t) for t in s.refs.tokens],
                "onsets": list(s.refs.onsets),
                "target": list(s.sot_target),
                "condition": s.condition,
            }
            blob = json.dumps(meta, sort_keys=True).encode()
            frames = np.ascontiguousarray(s.frames, dtype="<f4")
            fh.write(struct.pack("<I", len(blob)) + blob)
            fh.write(struct.pack("<II", *frames.shape) + frames.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetError(f"truncated dataset file while reading {what}")
    return buf


def read_dataset(path) -> MixtureDataset:
    path = Path(path)
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: unreadable header") from exc
        if header.get("format") != FORMAT_NAME:
            raise DatasetError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(
                f"{path}: version mismatch (file {header.get('version')}, reader {FORMAT_VERSION})"
            )
        spec = GenSpec.from_dict(header["genspec"])
        vocab = Vocab.from_dict(header["vocab"])
        if codebook_checksum(make_codebook(spec)) != header["codebook_sha256"]:
            raise DatasetError(f"{path}: codebook mismatch between header and generator seed")
        samples = []
        for i in range(header["num_samples"]):
            (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, f"sample {i}"))
            meta = json.loads(_read_exact(fh, meta_len, f"sample {i} metadata"))
            t, d = struct.unpack("<II", _read_exact(fh, 8, f"sample {i} frame shape"))
            raw = _read_exact(fh, 4 * t * d, f"sample {i} frames")
            frames = np.frombuffer(raw, dtype="<f4").reshape(t, d).astype(np.float32)
            refs = TalkerRefs.of(meta["tokens"], meta["onsets"])
            samples.append(MixtureSample(meta["id"], refs, frames, meta["target"], meta["condition"]))
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after the last sample")
    return MixtureDataset(spec, vocab, samples)
