"""Command-line entry point: gen-data, refine, probe, ablate, compare, explain.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand
writes ``resolved_config.json`` (flags > ``--config`` file > defaults, plus a
content hash of its inputs) into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import VOCAB, load_model, resolve_checkpoint_dir, save_checkpoint, file_sha256
from .corpus import (Vocabulary, build_vocab, generate_corpus, load_corpus, load_probe_dataset, read_image,
                     save_corpus, split)
from .encoders import ModelConfig, ObjectiveConfig, TextConfig, VisionConfig, build_model
from .explain import explain, write_saliency_csv
from .objectives import LOSS_NAMES
from .probe import POOLINGS, load_runs, render_report, run_protocol, save_runs
from .refine import PairedData, RefineConfig, refine

logger = logging.getLogger("vlrefine")

DEFAULT_ABLATIONS = "itc;mlm;itc,gm;itc,gm,mlm;itc,gm,mlm,itm"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def hash_inputs(paths: Sequence[Path]) -> str:
    """sha256 over every file under ``paths`` (relative names and bytes, sorted)."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = [root] if root.is_file() else sorted(p for p in root.rglob("*") if p.is_file())
        for f in files:
            h.update(str(f.relative_to(root.parent if root.is_file() else root)).encode())
            h.update(bytes.fromhex(file_sha256(f)))
    return h.hexdigest()


def write_resolved(args: argparse.Namespace, out_dir: Path, inputs: Sequence[Path] = ()) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    cfg["version"] = __version__
    # without input files the settings themselves identify the run; the output path does not
    settings = {k: v for k, v in cfg.items() if k != "out"}
    cfg["inputs_sha256"] = hash_inputs(inputs) if inputs else hashlib.sha256(
        json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()
    (out_dir / "resolved_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True, default=str) + "\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_losses(text: str) -> tuple[str, ...]:
    names = tuple(dict.fromkeys(t.strip().lower() for t in text.split(",") if t.strip()))
    bad = set(names) - set(LOSS_NAMES)
    if not names or bad:
        raise argparse.ArgumentTypeError(f"losses must be a nonempty subset of {','.join(LOSS_NAMES)}")
    return names


def _model_config(args, vocab: Vocabulary, image_size: int, channels: int) -> ModelConfig:
    return ModelConfig(
        vision=VisionConfig(image_size=image_size, patch_size=args.patch_size, embed_dim=args.embed_dim,
                            depth=args.depth, num_heads=args.heads, channels=channels),
        text=TextConfig(vocab_size=len(vocab), max_len=args.max_len, embed_dim=args.embed_dim, depth=args.depth,
                        num_heads=args.heads, cross_dim=args.embed_dim),
        objectives=ObjectiveConfig(),
    )


def _refine_config(args, losses=None) -> RefineConfig:
    return RefineConfig(lr=args.lr, batch_size=args.batch_size, weight_decay=args.weight_decay,
                        max_epochs=args.max_epochs, patience=args.patience, seed=args.seed,
                        freeze_vision=args.freeze_vision, losses=losses or args.losses)


def _run_refine(args, data_dir: Path, out: Path, losses=None):
    samples = load_corpus(data_dir)
    vocab = Vocabulary.from_json(data_dir / VOCAB) if (data_dir / VOCAB).exists() else build_vocab(samples)
    labels = [s.class_label for s in samples]
    tr, va = split(labels, (1.0 - args.val_fraction, args.val_fraction), args.seed)
    if args.base_checkpoint:
        base = resolve_checkpoint_dir(args.base_checkpoint)
        model = load_model(base)
        if (base / VOCAB).exists() and Vocabulary.from_json(base / VOCAB).token_to_id != vocab.token_to_id:
            raise ValueError("base checkpoint vocabulary differs from the data vocabulary")
        max_len = model.cfg.text.max_len
    else:
        image = samples[0].image
        model = build_model(_model_config(args, vocab, image.shape[-1], image.shape[0]), seed=args.seed)
        max_len = args.max_len
    train = PairedData.from_samples([samples[i] for i in tr], vocab, max_len)
    val = PairedData.from_samples([samples[i] for i in va], vocab, max_len)
    result = refine(model, train, val, _refine_config(args, losses), log_path=out / "log.csv")
    ckpt = out / "checkpoint"
    save_checkpoint(model, ckpt, extra={"refine": {
        "losses": list(losses or args.losses), "best_epoch": result.state.best_epoch,
        "stopped_epoch": result.state.epoch, "best_val_loss": result.state.best_val_loss}})
    vocab.to_json(ckpt / VOCAB)
    return result


def _load_probe_model(path: str, random_init: bool, seed: int):
    ckpt = resolve_checkpoint_dir(path)
    model = load_model(ckpt)
    if random_init:
        model = build_model(model.cfg, seed=seed)
    return model, ckpt


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args.out)
    samples = generate_corpus(args.n, args.classes, args.overlap, args.seed, image_size=args.image_size)
    save_corpus(samples, out)
    write_resolved(args, out)
    logger.info("wrote %d samples to %s", len(samples), out)
    return 0


def cmd_refine(args) -> int:
    out = _out_dir(args.out)
    inputs = [Path(args.data)] + ([Path(args.base_checkpoint)] if args.base_checkpoint else [])
    write_resolved(args, out, inputs)
    result = _run_refine(args, Path(args.data), out)
    logger.info("best epoch %d (val %.4f), stopped after epoch %d", result.state.best_epoch,
                result.state.best_val_loss, result.state.epoch)
    return 0


def cmd_probe(args) -> int:
    out_file = Path(args.out)
    out = _out_dir(str(out_file.parent))
    model, ckpt = _load_probe_model(args.checkpoint, args.random_init, args.seed)
    name = args.model_name or (f"{ckpt.parent.name}-random" if args.random_init else ckpt.parent.name)
    dataset = load_probe_dataset(args.data, model.cfg.vision.image_size, model.cfg.vision.channels)
    runs = run_protocol({name: model}, {Path(args.data).name: dataset}, strategy=args.pooling,
                        n_seeds=args.seeds, master_seed=args.seed, test_fraction=args.test_fraction,
                        average=args.average, workers=args.workers)
    save_runs(runs, out_file)
    write_resolved(args, out, [ckpt, Path(args.data)])
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args.out)
    probe_data = Path(args.probe_data or args.data)
    write_resolved(args, out, [Path(args.data), probe_data])
    subsets = [parse_losses(s) for s in args.subsets.split(";") if s.strip()]
    runs = []
    names = []
    for losses in subsets:
        name = "+".join(s.upper() for s in losses)
        names.append(name)
        sub_out = _out_dir(str(out / name.replace("+", "_").lower()))
        result = _run_refine(args, Path(args.data), sub_out, losses=losses)
        dataset = load_probe_dataset(probe_data, result.model.cfg.vision.image_size, result.model.cfg.vision.channels)
        runs += run_protocol({name: result.model}, {probe_data.name: dataset}, strategy=args.pooling,
                             n_seeds=args.seeds, master_seed=args.seed, workers=args.workers)
    save_runs(runs, out / "runs.json")
    report = render_report(runs, names[0], test=args.test, metrics=("bacc", "auroc", "ap", "f1"))
    (out / "report.md").write_text(report.markdown)
    (out / "report.csv").write_text(report.csv)
    return 0


def cmd_compare(args) -> int:
    out_file = Path(args.out)
    out = _out_dir(str(out_file.parent))
    runs = [r for path in args.runs for r in load_runs(path)]
    baseline = args.baseline or runs[0].model
    metrics = tuple(m.strip() for m in args.metrics.split(","))
    report = render_report(runs, baseline, test=args.test, metrics=metrics)
    out_file.write_text(report.markdown)
    out_file.with_suffix(".csv").write_text(report.csv)
    write_resolved(args, out, [Path(p) for p in args.runs])
    return 0


def cmd_explain(args) -> int:
    out_file = Path(args.out)
    out = _out_dir(str(out_file.parent))
    ckpt = resolve_checkpoint_dir(args.checkpoint)
    model = load_model(ckpt)
    vocab = Vocabulary.from_json(ckpt / VOCAB)
    image = read_image(args.image, model.cfg.vision.image_size, model.cfg.vision.channels)
    query = args.query if args.query == "all" else int(args.query)
    sal = explain(model, image, args.report, vocab, query)
    Image.fromarray(sal.overlay(image, args.alpha), mode="RGB").save(out_file)
    write_saliency_csv(sal.grid, out_file.with_name("saliency.csv"))
    write_resolved(args, out, [ckpt, Path(args.image)])
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_refine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--base-checkpoint", default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--max-epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--freeze-vision", action="store_true")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-len", type=int, default=48)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlrefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{gen-data,refine,probe,ablate,compare,explain}")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="JSON file of flag values (flags still take precedence)")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic paired corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = add("refine", cmd_refine, "refine a model with the joint objectives")
    _add_refine_flags(p)
    p.add_argument("--losses", type=parse_losses, default=LOSS_NAMES)

    p = add("probe", cmd_probe, "linear-probe a frozen checkpoint over several seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="gen-data directory or class-per-folder image directory")
    p.add_argument("--pooling", choices=POOLINGS, default="concat")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="master seed for splits and probe init")
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--average", choices=("macro", "weighted"), default="macro")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model-name", default=None)
    p.add_argument("--random-init", action="store_true", help="probe a fresh encoder with the checkpoint's architecture")
    p.add_argument("--out", required=True, help="runs.json path")

    p = add("ablate", cmd_ablate, "refine with several loss subsets and probe each")
    _add_refine_flags(p)
    p.add_argument("--subsets", default=DEFAULT_ABLATIONS, help="';'-separated loss subsets")
    p.add_argument("--probe-data", default=None)
    p.add_argument("--pooling", choices=POOLINGS, default="concat")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--test", choices=("wilcoxon", "ttest"), default="ttest")

    p = add("compare", cmd_compare, "tabulate probe runs against a baseline")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--baseline", default=None, help="model name (default: first model in the first file)")
    p.add_argument("--test", choices=("wilcoxon", "ttest"), default="wilcoxon")
    p.add_argument("--metrics", default="bacc,auroc,ap")
    p.add_argument("--out", required=True)

    p = add("explain", cmd_explain, "cross-attention saliency overlay for one image/report pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--query", default="all", help="'all' or a token position")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser = build_parser()
    subparsers = parser._subparsers._group_actions[0].choices
    # first pass only locates --config, so required flags may still be missing
    raw = list(sys.argv[1:] if argv is None else argv)
    if not any(a == "--config" or a.startswith("--config=") for a in raw):
        return parser.parse_args(raw)
    required = {(name, a.dest) for name, sub in subparsers.items() for a in sub._actions if a.required}
    _set_required(subparsers, required, False)
    args = parser.parse_args(raw)
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        sub = subparsers[args.command]
        unknown = sorted(set(overrides) - {a.dest for a in sub._actions})
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        if isinstance(overrides.get("losses"), str):
            overrides["losses"] = parse_losses(overrides["losses"])
        sub.set_defaults(**overrides)
    # flags supplied by the file are no longer required on the command line
    _set_required(subparsers, {(n, d) for n, d in required if not (n == args.command and d in overrides)}, True)
    return parser.parse_args(raw)


def _set_required(subparsers, pairs, value: bool) -> None:
    for name, dest in pairs:
        for action in subparsers[name]._actions:
            if action.dest == dest:
                action.required = value


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parseable line per failure
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        logger.debug("failure", exc_info=True)
        return 1


def run() -> None:
    sys.exit(main())
