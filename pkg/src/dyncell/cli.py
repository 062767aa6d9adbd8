"""Command-line surface for the whole pipeline.

Typical flow:

    dyncell gen-data --out-dir runs/demo
    dyncell pretrain-static --out-dir runs/demo
    dyncell search --out-dir runs/demo
    dyncell report runs/demo/runlog.jsonl --out-dir runs/demo
    dyncell finetune 0,2,0,0,1,5,4,0,0,1 --out-dir runs/demo
    dyncell eval runs/demo/finetuned.npz --out-dir runs/demo

Exit codes: 0 success, 2 configuration error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (CheckpointError, checkpoint_kind, load_cell,
                         load_dynamic_net, load_static_net, save_cell,
                         save_dynamic_net, save_static_net)
from .config import AppConfig, ConfigError, config_dict, load_config
from .data import DataError, generate, load_dataset, save_dataset, split
from .genotype import (GenotypeError, cell_param_count, decode, emit_dot,
                       format_tokens, parse_token_text)
from .network import Cell, DynamicCellNet, StaticNet
from .search import RunLog, SearchError, run_search, select_top_k
from .training import (CellTrainConfig, CellTrainer, copy_forward_report,
                       evaluate_dynamic, evaluate_static, finetune_end_to_end,
                       majority_class_report, pretrain_static)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


class MissingArtifact(RuntimeError):
    pass


def _say(msg: str):
    print(msg, flush=True)


def _slot_channels(cfg: AppConfig) -> list[int]:
    w1, w2, w3 = cfg.arch.widths
    return [cfg.arch.dec_width, w3, w1, w2, w3]


def _dataset(cfg: AppConfig, out_dir: Path):
    path = out_dir / "dataset"
    if not (path / "manifest.json").exists():
        raise MissingArtifact(
            f"no dataset at {path}; run `dyncell gen-data` first")
    return load_dataset(path)


def _splits(cfg: AppConfig, out_dir: Path):
    ds = _dataset(cfg, out_dir)
    return ds, split(ds, cfg.split.train_frac, cfg.split.meta_val_frac,
                     cfg.split.seed)


def _static(cfg: AppConfig, out_dir: Path) -> StaticNet:
    path = out_dir / "static.npz"
    if not path.exists():
        raise MissingArtifact(
            f"no static checkpoint at {path}; run `dyncell pretrain-static`")
    return load_static_net(path)


def _tokens_arg(value: str) -> list[int]:
    candidate = Path(value)
    if candidate.exists():
        return parse_token_text(candidate.read_text())
    return parse_token_text(value)


def cmd_gen_data(cfg: AppConfig, args) -> int:
    ds = generate(cfg.data)
    save_dataset(ds, args.out_dir / "dataset")
    _say(f"wrote {len(ds)} sequences of length {cfg.data.seq_len} "
         f"to {args.out_dir / 'dataset'}")
    return EXIT_OK


def cmd_pretrain_static(cfg: AppConfig, args) -> int:
    ds, splits = _splits(cfg, args.out_dir)
    net = StaticNet(np.random.default_rng(cfg.arch.seed),
                    ds.config.n_classes, dec_width=cfg.arch.dec_width,
                    widths=cfg.arch.widths)
    report = pretrain_static(net, splits.train, splits.val, cfg.static_train,
                             log=_say)
    save_static_net(args.out_dir / "static.npz", net)
    baseline = majority_class_report(splits.val, ds.config.n_classes)
    (args.out_dir / "static_metrics.json").write_text(json.dumps(
        {"val": report, "majority_class": baseline}, indent=2))
    _say(json.dumps(report))
    _say(f"majority-class baseline reward {baseline['reward']:.4f}")
    return EXIT_OK


def cmd_search(cfg: AppConfig, args) -> int:
    ds, splits = _splits(cfg, args.out_dir)
    net = _static(cfg, args.out_dir)
    log = run_search(net, splits.meta_train, splits.meta_val, cfg.search,
                     out_dir=args.out_dir, log=_say)
    best = select_top_k(log, 1)[0]
    _say(f"digest {log.digest()}")
    _say(f"best genotype {format_tokens(best)}")
    return EXIT_OK


def cmd_train_cell(cfg: AppConfig, args) -> int:
    tokens = _tokens_arg(args.genotype)
    genotype = decode(tokens, len(tokens) // 5)
    ds, splits = _splits(cfg, args.out_dir)
    net = _static(cfg, args.out_dir)
    cell = Cell(genotype, np.random.default_rng(cfg.search.seed),
                cfg.search.cell_width, net.dec_width, _slot_channels(cfg))
    trainer = CellTrainer(net, cell, splits.meta_train, splits.meta_val,
                          cfg.search.cell_train)
    trainer.train_epochs(cfg.search.cell_train.epochs)
    reward = trainer.evaluate()
    path = args.out_dir / "cell.npz"
    save_cell(path, cell, trainer.classifier)
    _say(json.dumps({"reward": reward}))
    _say(f"wrote {path}")
    return EXIT_OK


def cmd_finetune(cfg: AppConfig, args) -> int:
    tokens = _tokens_arg(args.genotype)
    genotype = decode(tokens, len(tokens) // 5)
    ds, splits = _splits(cfg, args.out_dir)
    net = _static(cfg, args.out_dir)
    cell = Cell(genotype, np.random.default_rng(cfg.finetune.seed),
                cfg.search.cell_width, net.dec_width, _slot_channels(cfg))
    phase1 = CellTrainConfig(epochs=cfg.finetune.pretrain_epochs,
                             batch_size=cfg.search.cell_train.batch_size,
                             lr=cfg.finetune.cell_lr, seed=cfg.finetune.seed)
    trainer = CellTrainer(net, cell, splits.train, splits.val, phase1)
    trainer.train_epochs(phase1.epochs)
    _say(f"cell-only phase reward {trainer.evaluate():.4f}")
    # hand the tuned classifier back to the shared static head
    net.classifier.w.data = trainer.classifier.w.data.copy()
    net.classifier.b.data = trainer.classifier.b.data.copy()
    report = finetune_end_to_end(net, cell, splits.train, splits.val,
                                 cfg.finetune, log=_say)
    baseline = copy_forward_report(net, splits.val)
    path = args.out_dir / "finetuned.npz"
    save_dynamic_net(path, net, cell)
    (args.out_dir / "finetune_metrics.json").write_text(json.dumps(
        {"val": report, "copy_forward": baseline}, indent=2))
    _say(json.dumps(report))
    _say(f"copy-forward baseline reward {baseline['reward']:.4f} "
         f"(margin {report['reward'] - baseline['reward']:+.4f})")
    _say(f"wrote {path}")
    return EXIT_OK


def cmd_eval(cfg: AppConfig, args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    ds, splits = _splits(cfg, args.out_dir)
    kind = checkpoint_kind(path)
    if kind == "static":
        report = evaluate_static(load_static_net(path), splits.val)
    elif kind == "dynamic":
        report = evaluate_dynamic(load_dynamic_net(path), splits.val)
    elif kind == "cell":
        cell, classifier = load_cell(path)
        net = _static(cfg, args.out_dir)
        dyn = DynamicCellNet(net, cell, classifier)
        report = evaluate_dynamic(dyn, splits.val)
    else:
        raise ConfigError(f"cannot evaluate checkpoint kind {kind!r}")
    _say(json.dumps(report))
    return EXIT_OK


def cmd_decode(cfg: AppConfig, args) -> int:
    tokens = _tokens_arg(args.tokens)
    genotype = decode(tokens, len(tokens) // 5)
    count = cell_param_count(genotype, cfg.search.cell_width,
                             cfg.arch.dec_width, _slot_channels(cfg))
    for i, step in enumerate(genotype.steps):
        _say(f"step {i}: in=({step.in1},{step.in2}) "
             f"ops=({step.op1},{step.op2}) agg={step.agg}")
    _say(f"trainable parameters: {count}")
    dot = emit_dot(genotype)
    dot_path = args.out_dir / "cell.dot"
    dot_path.write_text(dot)
    _say(dot)
    _say(f"wrote {dot_path}")
    return EXIT_OK


def cmd_report(cfg: AppConfig, args) -> int:
    from .report import write_report
    log = RunLog.load(Path(args.runlog))
    written = write_report(log, args.out_dir / "report")
    for path in written:
        _say(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyncell",
        description="dynamic-cell architecture search on synthetic video")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config mirroring the AppConfig tree")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the active subcommand's seed")
    parser.add_argument("--out-dir", type=Path, default=Path("out"),
                        help="artifact directory (default: ./out)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate the synthetic dataset")
    sub.add_parser("pretrain-static", help="train the per-frame network")
    sub.add_parser("search", help="run the controller-driven search")
    p = sub.add_parser("train-cell", help="train one genotype to completion")
    p.add_argument("genotype", help="comma-separated tokens or a token file")
    p = sub.add_parser("finetune", help="cell-only phase then end-to-end")
    p.add_argument("genotype", help="comma-separated tokens or a token file")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    p.add_argument("checkpoint")
    p = sub.add_parser("decode", help="print a genotype's DAG and params")
    p.add_argument("tokens")
    p = sub.add_parser("report", help="write report tables and figures")
    p.add_argument("runlog")
    return parser


_SEED_TARGETS = {
    "gen-data": ("data",),
    "pretrain-static": ("static_train",),
    "search": ("search",),
    "train-cell": ("search",),
    "finetune": ("finetune",),
}

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-static": cmd_pretrain_static,
    "search": cmd_search,
    "train-cell": cmd_train_cell,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            for section in _SEED_TARGETS.get(args.command, ()):
                getattr(cfg, section).seed = args.seed
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "config_used.json").write_text(
            json.dumps(config_dict(cfg), indent=2))
        return _COMMANDS[args.command](cfg, args)
    except (ConfigError, GenotypeError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, CheckpointError, SearchError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
