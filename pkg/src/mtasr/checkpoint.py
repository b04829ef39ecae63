"""Versioned checkpoints: a JSON manifest line followed by raw little-endian buffers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lora import attach, lora_linears
from .model import ModelBundle, ModelConfig

FORMAT_NAME = "mtasr-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    buffers: dict[str, np.ndarray]
    lora: list[dict] = field(default_factory=list)
    provenance: list[dict] = field(default_factory=list)
    rng_state: dict | None = None

    # -- model conversion ----------------------------------------------
    @classmethod
    def from_model(cls, model: ModelBundle, provenance=(), rng_state=None) -> Checkpoint:
        slots = [
            {"target": name, "r": lin.lora.r, "alpha": lin.lora.alpha, "dropout": lin.lora.dropout}
            for name, lin in lora_linears(model)
        ]
        buffers = {name: p.data.copy() for name, p in model.named_parameters()}
        return cls(model.cfg.to_dict(), buffers, slots, [dict(p) for p in provenance], rng_state)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.config)

    def to_model(self) -> ModelBundle:
        model = ModelBundle(self.model_config(), seed=0)
        modules = dict(model.named_modules())
        for slot in self.lora:
            target = modules.get(slot["target"])
            if target is None:
                raise CheckpointError(f"LoRA slot target {slot['target']!r} does not exist in the model")
            attach(target, slot["r"], slot["alpha"], slot["dropout"], np.random.default_rng(0))
        load_buffers(model, self.buffers)
        return model

    def with_provenance(self, entry: dict) -> Checkpoint:
        return Checkpoint(self.config, self.buffers, list(self.lora), [*self.provenance, dict(entry)], self.rng_state)

    # -- bytes -----------------------------------------------------------
    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.buffers):
            arr = np.asarray(self.buffers[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            entries.append({
                "name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)
            })
            blobs.append(raw)
            offset += len(raw)
        manifest = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "config": self.config,
            "lora": self.lora,
            "provenance": self.provenance,
            "rng_state": self.rng_state,
            "buffers": entries,
        }
        return json.dumps(manifest, sort_keys=True).encode() + b"\n" + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        head, sep, body = data.partition(b"\n")
        if not sep:
            raise CheckpointError("missing checkpoint manifest")
        try:
            manifest = json.loads(head)
        except json.JSONDecodeError as exc:
            raise CheckpointError("unreadable checkpoint manifest") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError("not an mtasr checkpoint")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint version {manifest.get('version')} unsupported (reader {FORMAT_VERSION})")
        buffers = {}
        for e in manifest["buffers"]:
            end = e["offset"] + e["nbytes"]
            if end > len(body):
                raise CheckpointError(f"truncated checkpoint: buffer {e['name']!r}")
            arr = np.frombuffer(body[e["offset"] : end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
            buffers[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        expected = sum(e["nbytes"] for e in manifest["buffers"])
        if expected != len(body):
            raise CheckpointError("checkpoint body size does not match its manifest")
        return cls(manifest["config"], buffers, manifest["lora"], manifest["provenance"], manifest["rng_state"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


def load_buffers(model: ModelBundle, buffers: dict[str, np.ndarray]) -> None:
    """Copy named buffers into the model; any name or shape mismatch is an error."""
    params = dict(model.named_parameters())
    problems = []
    for name in sorted(set(params) - set(buffers)):
        problems.append(f"missing from checkpoint: {name}")
    for name in sorted(set(buffers) - set(params)):
        problems.append(f"unexpected in checkpoint: {name}")
    for name in sorted(set(params) & set(buffers)):
        if params[name].shape != tuple(buffers[name].shape):
            problems.append(f"shape mismatch for {name}: model {params[name].shape}, checkpoint {buffers[name].shape}")
    if problems:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, p in params.items():
        p.data = np.array(buffers[name], dtype=p.dtype)
