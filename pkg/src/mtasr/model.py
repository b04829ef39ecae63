"""The full model bundle and its batched forward paths."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import Decoder, DecoderConfig, memory_bias
from .frontend import Encoder, FrontendConfig, Projector, Reducer
from .nn import Module, sinusoidal_positions, time_mask
from .prompts import PromptPlan, assemble, build_sop_tokens, end_token, prefix_layout, text_tokens
from .separator import Separator, SeparatorConfig, ctc_nll, greedy_decode, serialized_ctc_loss
from .tensor import DTensor
from .vocab import Vocab

IGNORE = -1
MEMORY_SOURCES = ("separated", "encoder")
STREAM_STRIDE = 512
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab: Vocab = field(default_factory=Vocab)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    prompt: PromptPlan = field(default_factory=PromptPlan)
    memory_source: str = "separated"
    memory_positions: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.memory_source not in MEMORY_SOURCES:
            raise ValueError(f"memory_source must be one of {MEMORY_SOURCES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")

    @classmethod
    def build(cls, vocab: Vocab | None = None, frame_dim: int = 16, max_talkers: int = 3, **overrides) -> ModelConfig:
        """Consistent sub-configs from a handful of top-level sizes."""
        vocab = vocab or Vocab()
        enc_dim = overrides.pop("enc_dim", 64)
        model_dim = overrides.pop("model_dim", 64)
        sep_hidden = overrides.pop("sep_hidden", 64)
        sep_bi = overrides.pop("sep_bidirectional", True)
        sep_drop = overrides.pop("sep_dropout", 0.0)
        dec = {k: overrides.pop(k) for k in list(overrides) if k in DecoderConfig.__dataclass_fields__}
        fe = {k: overrides.pop(k) for k in list(overrides) if k in FrontendConfig.__dataclass_fields__}
        prompt = PromptPlan(overrides.pop("prompt_variant", "sot_baseline"), overrides.pop("use_instruct", False))
        return cls(
            vocab=vocab,
            frontend=FrontendConfig(frame_dim=frame_dim, enc_dim=enc_dim, model_dim=model_dim, **fe),
            separator=SeparatorConfig(
                input_dim=enc_dim, hidden=sep_hidden, stream_dim=enc_dim, max_talkers=max_talkers,
                vocab_size=vocab.size, bidirectional=sep_bi, dropout=sep_drop,
            ),
            decoder=DecoderConfig(vocab_size=vocab.size, model_dim=model_dim, **dec),
            prompt=prompt,
            **{"memory_positions": True, **overrides},
        )

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab.to_dict(),
            "frontend": self.frontend.to_dict(),
            "separator": self.separator.to_dict(),
            "decoder": self.decoder.to_dict(),
            "prompt": {"variant": self.prompt.variant, "use_instruct": self.prompt.use_instruct},
            "memory_source": self.memory_source,
            "memory_positions": self.memory_positions,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            vocab=Vocab.from_dict(d["vocab"]),
            frontend=FrontendConfig(**d["frontend"]),
            separator=SeparatorConfig(**d["separator"]),
            decoder=DecoderConfig(**d["decoder"]),
            prompt=PromptPlan(d["prompt"]["variant"], d["prompt"]["use_instruct"]),
            memory_source=d["memory_source"],
            memory_positions=d.get("memory_positions", False),
            dtype=d["dtype"],
        )

    def replace(self, **changes) -> ModelConfig:
        from dataclasses import replace

        return replace(self, **changes)


@dataclass
class Batch:
    frames: np.ndarray
    lengths: np.ndarray
    talkers: list[list[list[int]]]
    targets: list[list[int]]
    ids: list[int]

    @classmethod
    def from_samples(cls, samples, dtype=np.float32) -> Batch:
        lengths = np.array([s.num_frames for s in samples])
        dim = samples[0].frames.shape[1]
        frames = np.zeros((len(samples), int(lengths.max()), dim), dtype=dtype)
        for i, s in enumerate(samples):
            frames[i, : s.num_frames] = s.frames
        return cls(
            frames,
            lengths,
            [s.refs.ordered() for s in samples],
            [list(s.sot_target) for s in samples],
            [s.sample_id for s in samples],
        )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Features:
    """Acoustic-side activations for one batch."""

    h_e: DTensor | None
    lengths: np.ndarray
    hd: DTensor | None = None
    lend: np.ndarray | None = None
    h2: DTensor | None = None
    len2: np.ndarray | None = None
    streams: list[DTensor] | None = None
    stream_lengths: np.ndarray | None = None
    sop: list[list[int]] | None = None


def _pad_stack(arrays, dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([a.shape[0] for a in arrays])
    out = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths


class ModelBundle(Module):
    """Encoder, reduction, projectors, separator/CTC and decoder."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        dtype = DTYPES[cfg.dtype]
        self.cfg = cfg
        self.encoder = Encoder(cfg.frontend, rng, dtype)
        self.reducer = Reducer(cfg.frontend, rng, dtype)
        self.projector = Projector(cfg.frontend.enc_dim, cfg.frontend.model_dim, rng, dtype=dtype)
        self.separator = Separator(cfg.separator, rng, dtype)
        self.mem_projector = Projector(cfg.separator.stream_dim, cfg.frontend.model_dim, rng, dtype=dtype)
        self.decoder = Decoder(cfg.decoder, rng, dtype)
        if cfg.decoder.adapter_mode != "none":
            self.decoder.insert_adapters(cfg.decoder.adapter_mode, cfg.decoder.adapter_dim, rng)

    @property
    def vocab(self) -> Vocab:
        return self.cfg.vocab

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    @property
    def plan(self) -> PromptPlan:
        return self.cfg.prompt

    def set_adapter_mode(self, mode: str, seed: int) -> None:
        if mode == "none":
            self.decoder.mode = "none"
        else:
            self.decoder.insert_adapters(mode, self.cfg.decoder.adapter_dim, np.random.default_rng(seed))
        self.cfg = self.cfg.replace(decoder=self.cfg.decoder.__class__(**{**self.cfg.decoder.to_dict(), "adapter_mode": mode}))

    def set_prompt(self, plan: PromptPlan) -> None:
        self.cfg = self.cfg.replace(prompt=plan)

    # -- acoustic side -------------------------------------------------
    def features(self, batch: Batch, with_streams: bool = False, with_sop: bool = False) -> Features:
        h_e = self.encoder(DTensor(batch.frames), batch.lengths)
        h2, hd, len2, lend = self.reducer(h_e, batch.lengths)
        feats = Features(h_e, batch.lengths, hd, lend, h2, len2)
        if with_streams or with_sop:
            self.add_streams(feats)
        if with_sop:
            feats.sop = self.sop_tokens(feats)
        return feats

    def add_streams(self, feats: Features) -> None:
        if self.cfg.frontend.separator_tap == "encoder_out":
            tap, lengths = feats.h_e, feats.lengths
        else:
            tap, lengths = feats.h2, feats.len2
        feats.streams = self.separator.separate(tap, lengths)
        feats.stream_lengths = lengths

    def ctc_logits(self, feats: Features) -> list[DTensor]:
        return [self.separator.ctc_logits(s) for s in feats.streams]

    def serctc_loss(self, batch: Batch, feats: Features):
        return serialized_ctc_loss(self.ctc_logits(feats), feats.stream_lengths, batch.talkers, self.vocab.blank_id)

    def ctc_decodes(self, feats: Features) -> list[list[list[int]]]:
        """Per-sample list of per-branch greedy decodes."""
        logits = [z.data for z in self.ctc_logits(feats)]
        return [
            [greedy_decode(z[i], self.vocab.blank_id, int(n)) for z in logits]
            for i, n in enumerate(feats.stream_lengths)
        ]

    def sop_tokens(self, feats: Features) -> list[list[int]]:
        return [build_sop_tokens(d) for d in self.ctc_decodes(feats)]

    def memory(self, feats: Features) -> tuple[DTensor, np.ndarray]:
        """Key/value memory for the adapters and its additive mask bias."""
        if self.cfg.memory_source == "encoder":
            src, lengths = feats.h_e, feats.lengths
            valid = time_mask(lengths, src.shape[1])
            index = np.arange(src.shape[1])
        else:
            src = T.concat(feats.streams, axis=1)
            frames = feats.streams[0].shape[1]
            valid = np.concatenate([time_mask(feats.stream_lengths, frames)] * len(feats.streams), axis=1)
            # each stream restarts its clock, offset so streams stay distinguishable
            index = np.concatenate([np.arange(frames) + k * STREAM_STRIDE for k in range(len(feats.streams))])
        mem = self.mem_projector(src)
        if self.cfg.memory_positions:
            table = sinusoidal_positions(int(index.max()) + 1, mem.shape[2], self.dtype)
            mem = mem + DTensor(np.broadcast_to(table[index], mem.shape).copy())
        return mem, memory_bias(valid, self.dtype)

    # -- decoder side --------------------------------------------------
    def _layouts(self, feats: Features, texts):
        plan, vocab = self.plan, self.vocab
        layouts = []
        for i, text in enumerate(texts):
            aco_rows = ()
            if "E_aco" in plan.prompt_parts:
                t = feats.streams[0].shape[1]
                n = int(feats.stream_lengths[i])
                aco_rows = [k * t + j for k in range(len(feats.streams)) for j in range(n)]
            prefix = prefix_layout(
                plan,
                vocab,
                sop_tokens=feats.sop[i] if feats.sop is not None else (),
                t_d=int(feats.lend[i]) if "H_p" in plan.prompt_parts else 0,
                aco_rows=aco_rows,
            )
            layouts.append((prefix, [("tok", t) for t in text]))
        return layouts

    def _decoder_inputs(self, feats: Features, layouts):
        plan = self.plan
        hp = self.projector(feats.hd) if "H_p" in plan.prompt_parts else None
        aco = None
        if "E_aco" in plan.prompt_parts:
            aco = self.mem_projector(T.concat(feats.streams, axis=1))
        x, lengths = assemble([p + t for p, t in layouts], self.decoder.embed, hp, aco, self.vocab.pad_id)
        memory = bias = None
        if self.decoder.mode != "none":
            memory, bias = self.memory(feats)
        return x, lengths, memory, bias

    def teacher_forced(self, batch: Batch, feats: Features):
        """Logits over the whole sequence and aligned labels (IGNORE on the prefix)."""
        pairs = [text_tokens(self.plan, self.vocab, t) for t in batch.targets]
        layouts = self._layouts(feats, [p[0] for p in pairs])
        x, lengths, memory, bias = self._decoder_inputs(feats, layouts)
        labels = np.full(x.shape[:2], IGNORE, dtype=np.int64)
        for i, ((prefix, _), (_, lab)) in enumerate(zip(layouts, pairs)):
            labels[i, len(prefix) : len(prefix) + len(lab)] = lab
        return self.decoder(x, memory, bias), labels

    def calibrate_adapters(self, batch: Batch, feats: Features) -> None:
        pairs = [text_tokens(self.plan, self.vocab, t) for t in batch.targets]
        layouts = self._layouts(feats, [p[0] for p in pairs])
        hp = self.projector(feats.hd) if "H_p" in self.plan.prompt_parts else None
        aco = self.mem_projector(T.concat(feats.streams, axis=1)) if "E_aco" in self.plan.prompt_parts else None
        x, lengths = assemble([p + t for p, t in layouts], self.decoder.embed, hp, aco, self.vocab.pad_id)
        self.decoder.calibrate_adapters(x, lengths)

    def sot_loss(self, batch: Batch, feats: Features) -> DTensor:
        logits, labels = self.teacher_forced(batch, feats)
        return T.cross_entropy(logits, labels, ignore_id=IGNORE)

    def generate(self, feats: Features, max_new=64) -> list[list[int]]:
        """Greedy autoregressive decoding for every sample in the batch."""
        plan, vocab = self.plan, self.vocab
        start = text_tokens(plan, vocab, [])[0][0]
        stop = end_token(plan, vocab)
        b = len(feats.lengths)
        caps = np.broadcast_to(np.asarray(max_new, dtype=np.int64), (b,))
        texts = [[start] for _ in range(b)]
        done = caps <= 0
        with T.no_grad():
            layouts = self._layouts(feats, [[]] * b)
            prefixes = [p for p, _ in layouts]
            hp = self.projector(feats.hd) if "H_p" in plan.prompt_parts else None
            aco = self.mem_projector(T.concat(feats.streams, axis=1)) if "E_aco" in plan.prompt_parts else None
            memory = bias = None
            if self.decoder.mode != "none":
                memory, bias = self.memory(feats)
            for _ in range(int(caps.max(initial=0)) + 1):
                if done.all():
                    break
                lay = [p + [("tok", t) for t in text] for p, text in zip(prefixes, texts)]
                x, lengths = assemble(lay, self.decoder.embed, hp, aco, vocab.pad_id)
                logits = self.decoder(x, memory, bias).data
                nxt = np.argmax(logits[np.arange(b), lengths - 1], axis=-1)
                for i in np.flatnonzero(~done):
                    if nxt[i] == stop:
                        done[i] = True
                    else:
                        texts[i].append(int(nxt[i]))
                        done[i] = len(texts[i]) > caps[i]
        return [t[1:] for t in texts]


class FeatureCache:
    """Per-sample activations of frozen acoustic modules, reassembled per batch."""

    def __init__(self, model: ModelBundle, samples, with_streams: bool, with_sop: bool, batch_size: int = 64):
        self.with_streams = with_streams
        self.dtype = model.dtype
        self.items: dict[int, dict] = {}
        was_training, rng = model.training, model._rng
        model.eval()
        with T.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = samples[start : start + batch_size]
                batch = Batch.from_samples(chunk, self.dtype)
                f = model.features(batch, with_streams=with_streams, with_sop=with_sop)
                for i, s in enumerate(chunk):
                    n, nd, n2 = int(f.lengths[i]), int(f.lend[i]), int(f.len2[i])
                    item = {"h_e": f.h_e.data[i, :n], "hd": f.hd.data[i, :nd], "h2": f.h2.data[i, :n2]}
                    if f.streams is not None:
                        ns = int(f.stream_lengths[i])
                        item["streams"] = [st.data[i, :ns] for st in f.streams]
                    if f.sop is not None:
                        item["sop"] = f.sop[i]
                    self.items[s.sample_id] = item
        if was_training:
            model.train(rng)

    def features(self, batch: Batch) -> Features:
        items = [self.items[i] for i in batch.ids]
        h_e, lengths = _pad_stack([it["h_e"] for it in items], self.dtype)
        hd, lend = _pad_stack([it["hd"] for it in items], self.dtype)
        h2, len2 = _pad_stack([it["h2"] for it in items], self.dtype)
        feats = Features(DTensor(h_e), lengths, DTensor(hd), lend, DTensor(h2), len2)
        if "streams" in items[0]:
            k = len(items[0]["streams"])
            padded = [_pad_stack([it["streams"][j] for it in items], self.dtype) for j in range(k)]
            feats.streams = [DTensor(p[0]) for p in padded]
            feats.stream_lengths = padded[0][1]
        if "sop" in items[0]:
            feats.sop = [it["sop"] for it in items]
        return feats


__all__ = ["Batch", "FeatureCache", "Features", "ModelBundle", "ModelConfig", "IGNORE", "ctc_nll"]
