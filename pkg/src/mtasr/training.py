"""Staged training recipe: SOT baseline, separator/SerCTC, adapter-only, LoRA refinement."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .evaluation import batches, decode, needs_sop, needs_streams, score_all
from .lora import STAGE0_ALPHA, STAGE0_DROPOUT, STAGE0_R, STAGE2_ALPHA, STAGE2_DROPOUT, STAGE2_R, attach, merge_all, stage_targets
from .model import Batch, FeatureCache, ModelBundle, ModelConfig
from .prompts import PromptPlan
from .scoring import corpus_wer
from .separator import joint_loss

log = logging.getLogger(__name__)

STAGES = ("sot_baseline", "serctc", "stage1_adapter", "stage2_refine")
DEFAULT_LR = {"sot_baseline": 3e-3, "serctc": 1e-2, "stage1_adapter": 5e-3, "stage2_refine": 5e-4}
DEFAULT_EPOCHS = {"sot_baseline": 30, "serctc": 30, "stage1_adapter": 20, "stage2_refine": 10}
CALIBRATION_SAMPLES = 128
METRIC_COLUMNS = ("epoch", "split", "loss", "token_wer")


class TrainingError(RuntimeError):
    pass


@dataclass
class StagePlan:
    stage: str
    epochs: int | None = None
    lr: float | None = None
    batch_size: int = 16
    seed: int = 0
    init: str | None = None
    adapter_mode: str = "gated"
    prompt_variant: str | None = None
    use_instruct: bool | None = None
    alpha: float | None = None
    decoder_lora: bool = False
    stage0_r: int = STAGE0_R
    lora_r: int = STAGE2_R
    lora_alpha: float = STAGE2_ALPHA
    lora_dropout: float = STAGE2_DROPOUT
    ca_only: bool = False
    clip_norm: float | None = 5.0
    gate_lr_scale: float = 1.0
    calibrate: bool = True
    dev_wer_every: int = 0
    max_dev: int | None = None
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.adapter_mode not in ("stacked", "gated"):
            raise ValueError("adapter_mode must be stacked or gated")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> StagePlan:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage plan keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    model: ModelBundle


# ---------------------------------------------------------------------------
# trainable sets


def _is_adapter(name: str) -> bool:
    return ".adapter." in name


def _is_lora(name: str) -> bool:
    return ".lora." in name


def trainable_names(model: ModelBundle, plan: StagePlan) -> set[str]:
    """Names of the parameter buffers the plan's stage may update."""
    names = [n for n, _ in model.named_parameters()]
    if plan.stage == "stage2_refine":
        return {n for n in names if _is_lora(n)}
    if plan.stage == "stage1_adapter":
        keep = {n for n in names if n.startswith("decoder.") and _is_adapter(n) and not _is_lora(n)}
        if model.decoder.mode != "gated":
            keep = {n for n in keep if not n.endswith(".gate")}
        return keep | {n for n in names if n.startswith("mem_projector.")}
    sot = _sot_names(model, plan, names)
    if plan.stage == "serctc":
        sep = {n for n in names if n.startswith("separator.")}
        return sep | sot if plan.alpha is not None else sep
    return sot


def _sot_names(model: ModelBundle, plan: StagePlan, names) -> set[str]:
    if plan.decoder_lora:
        dec = {n for n in names if n.startswith("decoder.") and _is_lora(n)} | {"decoder.embed"}
    else:
        dec = {n for n in names if n.startswith("decoder.") and not _is_adapter(n)}
    parts = model.plan.prompt_parts
    if model.plan.uses_separator:
        front = set()
        if "H_p" in parts:
            front |= {n for n in names if n.startswith("projector.")}
        if "E_aco" in parts:
            front |= {n for n in names if n.startswith("mem_projector.")}
    else:
        front = {n for n in names if n.split(".")[0] in ("encoder", "reducer", "projector")}
    return dec | front


def special_rows(model: ModelBundle) -> np.ndarray:
    v = model.vocab
    return np.array(sorted({v.bos_id, v.eos_id, *v.instruct_ids.values()}))


def apply_trainable(model: ModelBundle, names: set[str]) -> dict[str, T.DTensor]:
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.requires_grad = name in names
    return {n: params[n] for n in sorted(names)}


# ---------------------------------------------------------------------------
# model preparation


def init_model(plan: StagePlan, train, init: Checkpoint | None) -> ModelBundle:
    if init is None:
        cfg = ModelConfig.build(
            train.vocab, frame_dim=train.spec.frame_dim, max_talkers=train.spec.num_talkers, **dict(plan.model)
        )
        return ModelBundle(cfg, seed=plan.seed)
    cfg = init.model_config()
    if cfg.vocab != train.vocab:
        raise CheckpointError("incompatible checkpoint: vocabulary differs from the dataset's")
    if cfg.frontend.frame_dim != train.spec.frame_dim:
        raise CheckpointError(
            f"incompatible checkpoint: frame_dim {cfg.frontend.frame_dim} vs dataset {train.spec.frame_dim}"
        )
    if plan.model:
        want = ModelConfig.build(
            train.vocab, frame_dim=train.spec.frame_dim, max_talkers=cfg.separator.max_talkers, **dict(plan.model)
        )
        diffs = [k for k in ("frontend", "separator") if getattr(want, k) != getattr(cfg, k)]
        diffs += [k for k in ("model_dim", "layers", "heads", "mlp_dim") if getattr(want.decoder, k) != getattr(cfg.decoder, k)]
        if diffs:
            raise CheckpointError(f"incompatible checkpoint: run config disagrees on {diffs}")
    return init.to_model()


def prepare(model: ModelBundle, plan: StagePlan, rng: np.random.Generator) -> None:
    """Structural edits a stage makes before training (merges, adapters, LoRA slots)."""
    merged = merge_all(model)
    if merged:
        log.info("merged %d pending LoRA slots", merged)
    if plan.prompt_variant is not None or plan.use_instruct is not None:
        variant = plan.prompt_variant or model.plan.variant
        instruct = model.plan.use_instruct if plan.use_instruct is None else plan.use_instruct
        model.set_prompt(PromptPlan(variant, instruct))
    if plan.stage == "sot_baseline" and plan.decoder_lora:
        for _, lin in stage_targets("stage0", model.decoder):
            attach(lin, plan.stage0_r, STAGE0_ALPHA, STAGE0_DROPOUT, rng)
    elif plan.stage == "stage1_adapter":
        model.set_adapter_mode(plan.adapter_mode, int(rng.integers(2**31)))
    elif plan.stage == "stage2_refine":
        if model.decoder.mode == "none":
            raise TrainingError("stage2_refine needs a checkpoint with cross-attention adapters")
        for _, lin in stage_targets("stage2", model.decoder, ca_only=plan.ca_only):
            attach(lin, plan.lora_r, plan.lora_alpha, plan.lora_dropout, rng)


# ---------------------------------------------------------------------------
# losses


def _cache_spec(model: ModelBundle, plan: StagePlan, trainable: set[str]):
    """(with_streams, with_sop) for a feature cache, or None when the front end trains."""
    roots = {n.split(".")[0] for n in trainable}
    if roots & {"encoder", "reducer"}:
        return None
    if plan.stage == "serctc":
        return (False, False)
    if "separator" in roots:
        return None
    return (needs_streams(model), needs_sop(model))


def stage_loss(model: ModelBundle, plan: StagePlan, batch: Batch, feats) -> T.DTensor:
    if plan.stage == "serctc":
        if feats.streams is None:
            model.add_streams(feats)
        ser = model.serctc_loss(batch, feats).total
        if plan.alpha is None:
            return ser
        if needs_sop(model):
            feats.sop = model.sop_tokens(feats)
        return joint_loss(ser, model.sot_loss(batch, feats), plan.alpha)
    return model.sot_loss(batch, feats)


def _features(model, plan, batch, cache):
    if cache is not None:
        feats = cache.features(batch)
    else:
        streams = plan.stage == "serctc" or needs_streams(model)
        feats = model.features(batch, with_streams=streams, with_sop=needs_sop(model) and plan.stage != "serctc")
    return feats


def dataset_loss(model: ModelBundle, plan: StagePlan, samples, batch_size: int, cache=None) -> float:
    """Sample-weighted mean of the stage loss, without dropout or gradients."""
    was_training, rng = model.training, model._rng
    model.eval()
    total = 0.0
    with T.no_grad():
        for chunk in batches(samples, batch_size):
            batch = Batch.from_samples(chunk, model.dtype)
            total += float(stage_loss(model, plan, batch, _features(model, plan, batch, cache)).data) * len(chunk)
    if was_training:
        model.train(rng)
    return total / len(samples)


def dev_wer(model: ModelBundle, plan: StagePlan, samples, batch_size: int, cache=None) -> float:
    system = "ctc" if plan.stage == "serctc" else "decoder"
    hyps = decode(model, samples, system, batch_size, cache=cache)
    return corpus_wer(score_all(samples, hyps, model.vocab))


# ---------------------------------------------------------------------------
# the stage loop


def _check_finite(loss, plan, epoch, step, batch, opt):
    value = float(loss.data)
    if math.isfinite(value):
        return value
    norms = {n: float(np.linalg.norm(p.data)) for n, p in opt.params.items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -np.inf)[:5]
    nonfinite = [n for n, p in opt.params.items() if not np.isfinite(p.data).all()]
    raise TrainingError(
        f"non-finite loss {value} in stage {plan.stage}, epoch {epoch}, step {step}; "
        f"sample ids {batch.ids[:8]}{'...' if len(batch.ids) > 8 else ''}; "
        f"non-finite buffers {nonfinite or 'none'}; largest buffer norms {worst}"
    )


def _lr_scale(plan: StagePlan, params) -> dict[str, float]:
    return {n: plan.gate_lr_scale for n in params if n.endswith(".gate")}


def run_stage(plan: StagePlan, train, dev=None, init: Checkpoint | None = None) -> StageResult:
    """Train one stage and return its checkpoint plus per-epoch metrics rows."""
    if isinstance(init, (str, Path)):
        init = Checkpoint.load(init)
    if init is None and plan.init is not None:
        init = Checkpoint.load(plan.init)
    provenance = {
        "stage": plan.stage,
        "seed": plan.seed,
        "epochs": plan.epochs,
        "lr": plan.lr,
        "batch_size": plan.batch_size,
        "train_size": len(train),
        "train_genspec": train.spec.to_dict(),
    }
    if plan.epochs == 0 and init is not None:
        model = init.to_model()
        return StageResult(init.with_provenance(provenance), [], model)

    stage_index = STAGES.index(plan.stage)
    rng = np.random.default_rng([plan.seed, stage_index])
    model = init_model(plan, train, init)
    fresh_adapters = plan.stage == "stage1_adapter" and all(b.adapter is None for b in model.decoder.blocks)
    prepare(model, plan, rng)
    names = trainable_names(model, plan)
    if not names:
        raise TrainingError(f"stage {plan.stage} has no trainable buffers")
    params = apply_trainable(model, names)
    provenance["adapter_mode"] = model.decoder.mode
    provenance["prompt"] = {"variant": model.plan.variant, "use_instruct": model.plan.use_instruct}
    opt = T.Adam(params, lr=plan.lr, clip_norm=plan.clip_norm, lr_scale=_lr_scale(plan, params))
    row_mask = None
    if plan.stage == "sot_baseline" and plan.decoder_lora:
        row_mask = np.zeros((model.decoder.embed.shape[0], 1), dtype=model.dtype)
        row_mask[special_rows(model)] = 1.0

    train_samples = list(train.samples)
    dev_samples = list(dev.samples)[: plan.max_dev] if dev is not None else []
    spec = _cache_spec(model, plan, names)
    cache = dev_cache = None
    if spec is not None:
        cache = FeatureCache(model, train_samples, *spec)
        if dev_samples:
            dev_cache = FeatureCache(model, dev_samples, *spec)
    if fresh_adapters and plan.calibrate:
        batch = Batch.from_samples(train_samples[:CALIBRATION_SAMPLES], model.dtype)
        model.calibrate_adapters(batch, _features(model, plan, batch, cache))

    metrics: list[dict] = []
    model.train(rng)
    for epoch in range(1, plan.epochs + 1):
        total, count = 0.0, 0
        for step, chunk in enumerate(batches(train_samples, plan.batch_size, rng)):
            batch = Batch.from_samples(chunk, model.dtype)
            loss = stage_loss(model, plan, batch, _features(model, plan, batch, cache))
            value = _check_finite(loss, plan, epoch, step, batch, opt)
            opt.zero_grad()
            loss.backward()
            if row_mask is not None and model.decoder.embed.grad is not None:
                model.decoder.embed.grad = model.decoder.embed.grad * row_mask
            opt.step()
            total += value * len(chunk)
            count += len(chunk)
        metrics.append({"epoch": epoch, "split": "train", "loss": total / count, "token_wer": None})
        if dev_samples:
            row = {"epoch": epoch, "split": "dev", "loss": dataset_loss(model, plan, dev_samples, 64, dev_cache)}
            every = plan.dev_wer_every
            due = epoch == plan.epochs or (every > 0 and epoch % every == 0)
            row["token_wer"] = dev_wer(model, plan, dev_samples, 64, dev_cache) if due else None
            metrics.append(row)
        log.info("%s epoch %d: %s", plan.stage, epoch, metrics[-1])
    model.eval()
    for p in model.parameters().values():
        p.requires_grad = True
    ckpt = Checkpoint.from_model(model, [*(init.provenance if init else []), provenance], rng.bit_generator.state)
    return StageResult(ckpt, metrics, model)


def audit_step(plan: StagePlan, train, init: Checkpoint | None = None, n: int = 8) -> tuple[set[str], set[str]]:
    """(declared trainable set, buffers changed by one optimizer step).

    Fresh LoRA slots have B = 0, which zeroes A's gradient on the first step,
    so B is nudged off zero first; that is algebra, not freezing.
    """
    rng = np.random.default_rng([plan.seed, STAGES.index(plan.stage)])
    model = init_model(plan, train, init)
    prepare(model, plan, rng)
    names = trainable_names(model, plan)
    params = apply_trainable(model, names)
    for name, p in params.items():
        if name.endswith(".lora.B"):
            p.data = (rng.standard_normal(p.shape) * 1e-2).astype(p.data.dtype)
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    opt = T.Adam(params, lr=plan.lr, clip_norm=plan.clip_norm)
    model.train(rng)
    batch = Batch.from_samples(list(train.samples)[:n], model.dtype)
    loss = stage_loss(model, plan, batch, _features(model, plan, batch, None))
    opt.zero_grad()
    loss.backward()
    opt.step()
    after = dict(model.named_parameters())
    changed = {name for name, old in before.items() if not np.array_equal(old, after[name].data)}
    return names, changed


# ---------------------------------------------------------------------------
# metrics files


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({
                "epoch": int(r["epoch"]),
                "split": r["split"],
                "loss": float(r["loss"]),
                "token_wer": float(r["token_wer"]) if r["token_wer"] else None,
            })
    return out
