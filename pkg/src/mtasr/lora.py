"""Low-rank residual updates on named linear maps, with exact merging."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter
from .tensor import DTensor

STAGE0_R, STAGE0_ALPHA, STAGE0_DROPOUT = 16, 32.0, 0.1
STAGE2_R, STAGE2_ALPHA, STAGE2_DROPOUT = 8, 4.0, 0.1

SA_PROJECTIONS = ("q", "k", "v", "o")


class LoraError(ValueError):
    pass


class LoraSlot(Module):
    """``W x + (alpha / r) * B A drop(x)`` on top of a frozen base map."""

    def __init__(self, d_in: int, d_out: int, r: int, alpha: float, dropout: float, rng, dtype=np.float64):
        if not 1 <= r <= min(d_in, d_out):
            raise LoraError(f"rank {r} must be in [1, min(d_in, d_out)] = [1, {min(d_in, d_out)}]")
        bound = 1.0 / np.sqrt(d_in)
        self.A = Parameter(rng.uniform(-bound, bound, size=(r, d_in)), dtype)
        self.B = Parameter(np.zeros((d_out, r)), dtype)
        self.r = r
        self.alpha = float(alpha)
        self.dropout = float(dropout)
        self.enabled = True

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self, x: DTensor) -> DTensor:
        h = T.dropout(x, self.dropout, self._rng, self.training)
        return T.scale(T.linear(T.linear(h, self.A), self.B), self.scaling)

    def update(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


def attach(target: Linear, r: int, alpha: float, dropout: float, rng: np.random.Generator) -> LoraSlot:
    """Freeze ``target`` and give it a fresh zero-update slot."""
    if target.lora is not None and target.lora.enabled:
        raise LoraError("linear map already carries an unmerged LoRA slot")
    slot = LoraSlot(target.d_in, target.d_out, r, alpha, dropout, rng, target.weight.dtype)
    target.weight.requires_grad = False
    if target.bias is not None:
        target.bias.requires_grad = False
    target.lora = slot
    return slot


def merge(target: Linear) -> np.ndarray:
    """Fold the slot into the dense weight and detach it; returns the new weight."""
    slot = target.lora
    if slot is None or not slot.enabled:
        raise LoraError("no unmerged LoRA slot to merge (double merge?)")
    target.weight.data = (target.weight.data + slot.update()).astype(target.weight.dtype)
    slot.enabled = False
    target.lora = None
    return target.weight.data


def lora_linears(model: Module) -> list[tuple[str, Linear]]:
    return [
        (name, mod)
        for name, mod in model.named_modules()
        if isinstance(mod, Linear) and mod.lora is not None and mod.lora.enabled
    ]


def merge_all(model: Module) -> int:
    targets = lora_linears(model)
    for _, lin in targets:
        merge(lin)
    return len(targets)


def stage_targets(stage: str, decoder, ca_only: bool = False, sa_subset=SA_PROJECTIONS) -> list[tuple[str, Linear]]:
    """Named linears that a LoRA stage adapts.

    ``stage0`` covers the self-attention projections of every layer;
    ``stage2`` adds the cross-attention adapter projections (or only those
    when ``ca_only``).
    """
    if stage not in ("stage0", "stage2"):
        raise LoraError(f"unknown LoRA stage {stage!r}")
    out: list[tuple[str, Linear]] = []
    for i, block in enumerate(decoder.blocks):
        sa = [(f"blocks.{i}.attn.{p}", getattr(block.attn, p)) for p in sa_subset]
        if stage == "stage0":
            out.extend(sa)
            continue
        if block.adapter is None:
            raise LoraError("stage2 refinement needs cross-attention adapters in every layer")
        ca = [(f"blocks.{i}.adapter.{p}", getattr(block.adapter, p)) for p in SA_PROJECTIONS]
        out.extend(ca if ca_only else sa + ca)
    return out
