"""The five-system ablation grid and its Markdown report."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import GenSpec, generate_split
from .evaluation import decode, score_all
from .training import StagePlan, run_stage, write_metrics

log = logging.getLogger(__name__)

SYSTEMS = ("sot", "stack", "adaptation", "refinement", "serctc")
PROMPT_SYSTEMS = ("token", "hybrid", "acoustic")
SYSTEM_LABELS = {
    "sot": "SOT (baseline)",
    "stack": "Stack",
    "adaptation": "Adaptation",
    "refinement": "Refinement",
    "serctc": "Serialized CTC",
    "token": "Token prompt",
    "hybrid": "Hybrid prompt",
    "acoustic": "Acoustic prompt",
}
CONDITIONS = ("clean", "noisy")
SPLITS = ("dev", "test")
EVAL_COLUMNS = ("system", "K", "condition", "seed", "split", "token_wer", "sub", "del", "ins", "n_ref")


@dataclass
class GridConfig:
    talkers: list = field(default_factory=lambda: [2, 3])
    conditions: list = field(default_factory=lambda: list(CONDITIONS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    systems: list = field(default_factory=lambda: list(SYSTEMS))
    noise_std: float = 0.5
    n_train: int = 2000
    n_dev: int = 300
    n_test: int = 300
    batch_size: int = 16
    epochs: dict = field(default_factory=dict)
    lr: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    genspec: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    dev_wer_every: int = 0
    out: str = "runs"

    def __post_init__(self):
        bad = [s for s in self.systems if s not in SYSTEMS + PROMPT_SYSTEMS]
        if bad:
            raise ValueError(f"unknown systems {bad}")
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad:
            raise ValueError(f"unknown conditions {bad}")

    @classmethod
    def from_dict(cls, d: dict) -> GridConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Cell:
    talkers: int
    condition: str
    seed: int

    @property
    def name(self) -> str:
        return f"K{self.talkers}_{self.condition}/seed{self.seed}"


def ablation_matrix(cfg: GridConfig) -> list[tuple[Cell, str]]:
    """Every (cell, system) run the grid materializes."""
    cells = [Cell(k, c, s) for k, c, s in itertools.product(cfg.talkers, cfg.conditions, cfg.seeds)]
    return [(cell, system) for cell in cells for system in cfg.systems]


def _required_stages(systems) -> list[str]:
    """Stage runs, in dependency order, needed to produce the requested systems."""
    needs = {
        "sot": ["sot"],
        "serctc": ["sot", "serctc"],
        "stack": ["sot", "serctc", "stack"],
        "adaptation": ["sot", "serctc", "adaptation"],
        "refinement": ["sot", "serctc", "adaptation", "refinement"],
        "token": ["sot", "serctc", "token"],
        "hybrid": ["sot", "serctc", "hybrid"],
        "acoustic": ["sot", "serctc", "acoustic"],
    }
    order = ["sot", "serctc", "stack", "adaptation", "refinement", "token", "hybrid", "acoustic"]
    wanted = {s for sys in systems for s in needs[sys]}
    return [s for s in order if s in wanted]


def _plan(cfg: GridConfig, run: str, seed: int) -> StagePlan:
    stage, extra = {
        "sot": ("sot_baseline", {}),
        "serctc": ("serctc", {}),
        "stack": ("stage1_adapter", {"adapter_mode": "stacked"}),
        "adaptation": ("stage1_adapter", {"adapter_mode": "gated"}),
        "refinement": ("stage2_refine", {}),
        "token": ("sot_baseline", {"prompt_variant": "token"}),
        "hybrid": ("sot_baseline", {"prompt_variant": "hybrid"}),
        "acoustic": ("sot_baseline", {"prompt_variant": "acoustic"}),
    }[run]
    kw = dict(stage=stage, batch_size=cfg.batch_size, seed=seed, dev_wer_every=cfg.dev_wer_every, **extra)
    if run in cfg.epochs:
        kw["epochs"] = cfg.epochs[run]
    elif stage in cfg.epochs:
        kw["epochs"] = cfg.epochs[stage]
    if run in cfg.lr:
        kw["lr"] = cfg.lr[run]
    elif stage in cfg.lr:
        kw["lr"] = cfg.lr[stage]
    if run == "sot":
        kw["model"] = dict(cfg.model)
    kw.update(cfg.options.get(stage, {}))
    kw.update(cfg.options.get(run, {}))
    return StagePlan(**kw)


_PARENT = {"serctc": "sot", "stack": "serctc", "adaptation": "serctc", "refinement": "adaptation",
           "token": "serctc", "hybrid": "serctc", "acoustic": "serctc"}


def cell_datasets(cfg: GridConfig, cell: Cell):
    noise = cfg.noise_std if cell.condition == "noisy" else 0.0
    spec = GenSpec(**{**cfg.genspec, "num_talkers": cell.talkers, "noise_std": noise, "seed": cell.seed})
    return (
        generate_split(spec, "train", cfg.n_train),
        generate_split(spec, "dev", cfg.n_dev),
        generate_split(spec, "test", cfg.n_test),
    )


def evaluate_system(model, system: str, cell: Cell, splits: dict) -> list[dict]:
    rows = []
    for split, ds in splits.items():
        hyps = decode(model, ds.samples, "ctc" if system == "serctc" else "decoder")
        scores = score_all(ds.samples, hyps, model.vocab)
        n = sum(s.n_ref for s in scores)
        err = sum(s.errors for s in scores)
        rows.append({
            "system": system, "K": cell.talkers, "condition": cell.condition, "seed": cell.seed, "split": split,
            "token_wer": 100.0 * err / n, "sub": sum(s.sub for s in scores), "del": sum(s.dele for s in scores),
            "ins": sum(s.ins for s in scores), "n_ref": n,
        })
    return rows


def write_eval(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def run_cell(cfg: GridConfig, cell: Cell, out: Path) -> list[dict]:
    """All stage runs of one (K, condition, seed) cell; returns its eval rows."""
    out.mkdir(parents=True, exist_ok=True)
    train, dev, test = cell_datasets(cfg, cell)
    ckpts: dict[str, Checkpoint] = {}
    rows: list[dict] = []
    for run in _required_stages(cfg.systems):
        t0 = time.time()
        plan = _plan(cfg, run, cell.seed)
        result = run_stage(plan, train, dev, init=ckpts.get(_PARENT.get(run)))
        ckpts[run] = result.checkpoint
        run_dir = out / run
        run_dir.mkdir(exist_ok=True)
        result.checkpoint.save(run_dir / "model.ckpt")
        write_metrics(result.metrics, run_dir / "metrics.csv")
        log.info("%s %s done in %.1fs", cell.name, run, time.time() - t0)
        if run in cfg.systems:
            rows += evaluate_system(result.model, run, cell, {"dev": dev, "test": test})
    write_eval(rows, out / "eval.csv")
    return rows


def run_grid(cfg: GridConfig) -> list[dict]:
    out = Path(cfg.out)
    rows = []
    cells = sorted({cell for cell, _ in ablation_matrix(cfg)}, key=lambda c: (c.talkers, c.condition, c.seed))
    for cell in cells:
        rows += run_cell(cfg, cell, out / cell.name)
    return rows


# ---------------------------------------------------------------------------
# report


def read_eval_rows(runs_dir) -> list[dict]:
    rows = []
    for path in sorted(Path(runs_dir).rglob("eval.csv")):
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({**r, "K": int(r["K"]), "seed": int(r["seed"]), "token_wer": float(r["token_wer"])})
    return rows


def aggregate(rows) -> dict[tuple, float]:
    """Mean WER over seeds keyed by (system, K, condition, split)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["system"], r["K"], r["condition"], r["split"]), []).append(r["token_wer"])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def render_report(rows) -> str:
    if not rows:
        raise ValueError("no eval.csv rows found")
    means = aggregate(rows)
    systems = [s for s in SYSTEMS + PROMPT_SYSTEMS if any(k[0] == s for k in means)]
    ks = sorted({k[1] for k in means})
    columns = [(k, c, s) for k in ks for c in CONDITIONS for s in SPLITS]
    seeds = sorted({r["seed"] for r in rows})
    head = "| System | " + " | ".join(f"K={k} {c} {s}" for k, c, s in columns) + " |"
    lines = [
        f"Token WER (%), mean over seeds {seeds}.",
        "",
        head,
        "|" + "---|" * (len(columns) + 1),
    ]
    for sys in systems:
        cells = [means.get((sys, k, c, s)) for k, c, s in columns]
        lines.append(
            f"| {SYSTEM_LABELS[sys]} | " + " | ".join("-" if v is None else f"{v:.2f}" for v in cells) + " |"
        )
    return "\n".join(lines) + "\n"
