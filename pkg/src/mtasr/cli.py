"""Command-line entry point: ``mtasr <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import Checkpoint, CheckpointError
from .data import DatasetError, GenSpec, SPLIT_OFFSETS, generate, read_dataset, write_dataset
from .evaluation import decode, score_all
from .grid import GridConfig, read_eval_rows, render_report, run_grid
from .lora import LoraError, merge_all
from .scoring import SCORING_MODES, corpus_wer
from .training import STAGES, StagePlan, TrainingError, run_stage, write_metrics

log = logging.getLogger("mtasr")


def load_config(path) -> dict:
    """Key-value run config (YAML or JSON)."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def _cmd_gen(args) -> int:
    spec = GenSpec(
        num_talkers=args.talkers,
        content_size=args.content_size,
        min_len=args.min_len,
        max_len=args.max_len,
        frames_per_token=args.frames_per_token,
        frame_dim=args.frame_dim,
        onset_jitter=(args.jitter_min, args.jitter_max),
        noise_std=args.noise,
        seed=args.seed,
    )
    start = SPLIT_OFFSETS[args.split] if args.start is None else args.start
    write_dataset(generate(spec, args.n, start), args.out)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_path = cfg.pop("train", None)
    if train_path is None:
        raise ValueError("config needs a 'train' dataset path")
    dev_path = cfg.pop("dev", None)
    out = Path(args.out or cfg.pop("out", "run"))
    cfg.pop("out", None)
    cfg["stage"] = args.stage
    if args.init:
        cfg["init"] = args.init
    plan = StagePlan.from_dict(cfg)
    train = read_dataset(train_path)
    dev = read_dataset(dev_path) if dev_path else None
    result = run_stage(plan, train, dev)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out / "model.ckpt")
    write_metrics(result.metrics, out / "metrics.csv")
    print(f"saved {out / 'model.ckpt'}")
    return 0


def _system(args, ckpt: Checkpoint) -> str:
    if args.system != "auto":
        return args.system
    return "ctc" if ckpt.provenance and ckpt.provenance[-1]["stage"] == "serctc" else "decoder"


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data = read_dataset(args.data)
    model = ckpt.to_model()
    hyps = decode(model, data.samples, _system(args, ckpt))
    scores = score_all(data.samples, hyps, model.vocab, args.mode, strip_sc=not args.keep_sc)
    s = sum(x.sub for x in scores)
    d = sum(x.dele for x in scores)
    i = sum(x.ins for x in scores)
    n = sum(x.n_ref for x in scores)
    print(f"token_wer={corpus_wer(scores):.4f} sub={s} del={d} ins={i} n_ref={n} mode={args.mode}")
    return 0


def _cmd_decode(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data = read_dataset(args.data)
    model = ckpt.to_model()
    hyps = decode(model, data.samples, _system(args, ckpt))
    with open(args.out, "w") as fh:
        for s, h in zip(data.samples, hyps):
            rec = {
                "sample_id": s.sample_id,
                "hyp_ids": [int(t) for t in h],
                "ref_ids": [int(t) for t in s.sot_target],
                "K": s.refs.num_talkers,
                "condition": s.condition,
            }
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(hyps)} hypotheses to {args.out}")
    return 0


def _cmd_merge(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    model = ckpt.to_model()
    n = merge_all(model)
    if n == 0:
        raise LoraError("checkpoint has no unmerged LoRA slots")
    merged = Checkpoint.from_model(model, ckpt.provenance + [{"stage": "merge_lora", "slots": n}], ckpt.rng_state)
    merged.save(args.out)
    print(f"merged {n} slots into {args.out}")
    return 0


def _cmd_grid(args) -> int:
    cfg = GridConfig.from_dict(load_config(args.config))
    if args.out:
        cfg.out = args.out
    rows = run_grid(cfg)
    print(render_report(rows))
    return 0


def _cmd_report(args) -> int:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise FileNotFoundError(f"runs directory not found: {runs}")
    text = render_report(read_eval_rows(runs))
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtasr", description="Desk-scale multi-talker ASR experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic mixture dataset")
    g.add_argument("--talkers", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--split", choices=tuple(SPLIT_OFFSETS), default="train")
    g.add_argument("--start", type=int, default=None, help="first sample index (overrides --split)")
    g.add_argument("--content-size", type=int, default=32)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--frames-per-token", type=int, default=4)
    g.add_argument("--frame-dim", type=int, default=16)
    g.add_argument("--jitter-min", type=int, default=2)
    g.add_argument("--jitter-max", type=int, default=12)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=STAGES, required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--init", default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(func=_cmd_train)

    for name, func, helptext in (("eval", _cmd_eval, "score a checkpoint"), ("decode", _cmd_decode, "write JSONL hypotheses")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--system", choices=("auto", "decoder", "ctc"), default="auto")
        if name == "eval":
            e.add_argument("--mode", choices=SCORING_MODES, default="concatenated")
            e.add_argument("--keep-sc", action="store_true", help="score the speaker-change token as a word")
        else:
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)

    m = sub.add_parser("merge-lora", help="fold LoRA slots into the base weights")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_merge)

    gr = sub.add_parser("grid", help="run the ablation grid")
    gr.add_argument("--config", required=True)
    gr.add_argument("--out", default=None)
    gr.set_defaults(func=_cmd_grid)

    r = sub.add_parser("report", help="aggregate eval CSVs into a Markdown table")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"mtasr {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError, LoraError, TrainingError, ValueError, yaml.YAMLError) as exc:
        print(f"mtasr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
