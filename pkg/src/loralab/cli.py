"""Command-line entry point: ``loralab <subcommand>``.

Subcommands: gen-data, warmup, train, eval, sweep, plot. Failures exit with
the category code carried by the raised error (see ``loralab.errors``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .datagen import CORPUS_KINDS, JSONL_SCHEMAS, gen_corpus, load_jsonl
from .errors import ConfigError, LoraLabError
from .experiments import EXPERIMENTS, ExperimentSpec, Lab, LabConfig, paper_scale, run_experiment
from .init_schemes import InitSpec, initialize
from .metrics import evaluate
from .model import load_adapters, save_adapters
from .objectives import OBJECTIVE_KINDS
from .plots import PLOT_KINDS, emit_plot
from .runtime import tune_allocator
from .trainer import run_phase

OUT_ENV = "LORALAB_OUT"
DEFAULT_OUT = "loralab-out"

log = logging.getLogger("loralab")


def default_out() -> str:
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})") from e


def _lab(args) -> LabConfig:
    cfg = _read_config(args.config)
    lab = LabConfig.from_dict(cfg.get("lab", {}))
    # mcq is an evaluation-only task; the lab keeps its training task
    if getattr(args, "task", None) in ("math", "title"):
        lab = replace(lab, task=args.task)
    return paper_scale(lab) if args.paper_scale else lab


def _cache(args, cfg: dict | None = None) -> Path:
    cfg = cfg or {}
    return Path(cfg.get("cache_dir") or Path(args.out) / "cache")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    corpus = gen_corpus(args.kind, args.size, args.seed)
    path = Path(args.file) if args.file else Path(args.out) / f"{args.kind}-{args.size}-{args.seed}.jsonl"
    corpus.to_jsonl(path)
    _emit({"kind": args.kind, "size": len(corpus), "seed": args.seed, "path": str(path)})
    return 0


def cmd_warmup(args) -> int:
    lab = Lab(_lab(args), _cache(args, _read_config(args.config)))
    path = lab.warmup(args.m, args.seed)
    _emit({"m": args.m, "seed": args.seed, "checkpoint": str(path)})
    return 0


def cmd_train(args) -> int:
    lab_cfg = _lab(args)
    lab = Lab(lab_cfg, _cache(args, _read_config(args.config)))
    if args.scheme == "d2lora":
        ckpt = args.checkpoint or str(lab.warmup(args.m, args.seed))
        model = initialize(lab.base(), InitSpec("d2lora", args.seed, ckpt))
    else:
        model = initialize(lab.base(), InitSpec(args.scheme, args.seed))
    if args.data:
        task = load_jsonl(args.data, args.schema)
    else:
        task = lab.corpus(lab_cfg.task, args.n, "task")
    state = run_phase(model, lab.adapt_plan(args.method, args.n, args.seed), task)
    dest = Path(args.out) / f"adapters-{args.scheme}-{args.method}-n{args.n}-s{args.seed}"
    save_adapters(state.adapters, dest, lab_cfg.model,
                  {"scheme": args.scheme, "method": args.method, "n": args.n, "seed": args.seed})
    _emit({"adapters": str(dest), "steps": state.steps,
           "final_loss": state.trace[-1]["loss"] if state.trace else None})
    return 0


def cmd_eval(args) -> int:
    lab_cfg = _lab(args)
    lab = Lab(lab_cfg, _cache(args, _read_config(args.config)))
    model = lab.base().copy()
    if args.adapters:
        model.attach(load_adapters(args.adapters))
    task = args.task or lab_cfg.task
    if args.data:
        corpus = load_jsonl(args.data, args.schema)
    else:
        size = lab_cfg.probe_size if task == "mcq" else lab_cfg.eval_size
        corpus = lab.corpus(task, size, "probe" if task == "mcq" else "eval")
    reports = evaluate(model, corpus, task, args.seed)
    _emit({k: r.to_dict() for k, r in reports.items()})
    return 0


def cmd_sweep(args) -> int:
    cfg = _read_config(args.config)
    cfg["experiment"] = args.experiment
    cfg["output_dir"] = args.out
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    if args.seeds:
        cfg["seeds"] = args.seeds
    if args.n_grid:
        cfg["n_grid"] = args.n_grid
    if args.m is not None:
        cfg["m"] = args.m
    if args.methods:
        cfg["methods"] = args.methods
    spec = ExperimentSpec.from_dict(cfg)
    if args.paper_scale:
        spec = replace(spec, lab=paper_scale(spec.lab))
    path = run_experiment(spec)
    _emit({"metrics": str(path), "manifest": str(path.with_suffix(".manifest.json"))})
    return 0


def cmd_plot(args) -> int:
    path = emit_plot(args.metrics, args.kind, args.file, args.metric)
    _emit({"plot": str(path)})
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring the experiment spec fields")
    common.add_argument("--out", default=default_out(),
                        help=f"output root (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--paper-scale", action="store_true",
                        help="use the published hyperparameters (rank 16, lr 1e-7/1e-6, ...)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="loralab", description="Two-phase LoRA experiments at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus as JSONL")
    g.add_argument("--kind", choices=CORPUS_KINDS, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--file", help="destination file (default: <out>/<kind>-<size>-<seed>.jsonl)")
    g.set_defaults(func=cmd_gen_data)

    w = sub.add_parser("warmup", parents=[common], help="train (or reuse) a warm-up checkpoint")
    w.add_argument("--m", type=int, default=2000)
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_warmup)

    t = sub.add_parser("train", parents=[common], help="adapt on task data and save adapters")
    t.add_argument("--method", choices=OBJECTIVE_KINDS, default="sft")
    t.add_argument("--scheme", choices=("vanilla", "kaiming", "pissa", "olora", "d2lora"), default="vanilla")
    t.add_argument("--task", choices=("math", "title"))
    t.add_argument("--n", type=int, default=100)
    t.add_argument("--m", type=int, default=2000, help="warm-up size when --scheme d2lora")
    t.add_argument("--checkpoint", help="existing warm-up checkpoint for --scheme d2lora")
    t.add_argument("--data", help="JSONL task data instead of the synthetic corpus")
    t.add_argument("--schema", choices=sorted(JSONL_SCHEMAS), default="step_dpo")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate the base model or saved adapters")
    e.add_argument("--adapters", help="adapter checkpoint directory")
    e.add_argument("--task", choices=("math", "title", "mcq"))
    e.add_argument("--data", help="JSONL evaluation data instead of the synthetic corpus")
    e.add_argument("--schema", choices=sorted(JSONL_SCHEMAS), default="step_dpo")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="run one of the four experiments")
    s.add_argument("experiment", choices=EXPERIMENTS)
    s.add_argument("--seed", type=int, help="run a single seed")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--n-grid", type=int, nargs="+")
    s.add_argument("--m", type=int)
    s.add_argument("--methods", nargs="+", choices=OBJECTIVE_KINDS)
    s.set_defaults(func=cmd_sweep)

    pl = sub.add_parser("plot", parents=[common], help="render a metrics file to SVG")
    pl.add_argument("metrics")
    pl.add_argument("--kind", choices=PLOT_KINDS, default="curve")
    pl.add_argument("--metric")
    pl.add_argument("--file", help="destination SVG")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LoraLabError as e:
        print(f"loralab: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
