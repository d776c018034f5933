"""Command-line entry point: gen, train, eval and sweep subcommands.

Every command is a pure function of its input files and the configured
seeds: rerunning with identical inputs produces byte-identical outputs.
Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .corpus import EmbeddingCorpus, generate_synthetic, load_corpus, save_corpus, split_corpus
from .errors import ConfigError, DataFormatError, NumericError
from .evaluation import METHODS, EvalConfig, evaluate, sensitivity_sweep
from .graph import dump_graph, sggnn_forward_features
from .params import ModelParams, load_checkpoint, save_checkpoint
from .relation import bn_forward, embed_forward, sigmoid
from .report import (
    metrics_table,
    sweep_table,
    write_metrics_report,
    write_sweep_report,
    write_train_log,
)
from .trainer import BatchSampler, stage1_train, stage2_train


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems as ConfigError (exit 1)."""

    def error(self, message: str):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sggnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--corpus", help="corpus file path (overrides corpus.path)")
    common.add_argument("--seed", type=int, help="rebase all configured seeds on this value")

    p_gen = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus file")
    p_gen.add_argument(
        "--synth-config", dest="config",
        help="config file with the corpus.* generator keys (alias for --config)",
    )
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", parents=[common], help="run the two training stages")
    p_train.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p_train.add_argument("--checkpoint", help="stage-1 checkpoint to resume from (--stage 2)")
    p_train.add_argument(
        "--checkpoint-every", type=int, default=0, metavar="E",
        help="additionally write a checkpoint every E epochs",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate ranking methods")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--methods", help="comma-separated method list")
    p_eval.add_argument("--report", help="write CSV report here (plus .txt and .png siblings)")
    p_eval.add_argument("--dump-graph", help="write a diagnostic graph dump for the first probe")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", parents=[common], help="sensitivity sweep over the grid")
    p_sweep.add_argument(
        "--checkpoint", required=True,
        help="checkpoint path; '{K}' is substituted per grid row when present",
    )
    p_sweep.add_argument("--report", help="write CSV report here (plus .txt and .png siblings)")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.default()
    if args.seed is not None:
        cfg.rebase_seeds(args.seed)
    if args.corpus:
        cfg.values["corpus.path"] = args.corpus
    return cfg


def _corpus_for(cfg: ExperimentConfig) -> EmbeddingCorpus:
    path = str(cfg["corpus.path"])
    if path:
        return load_corpus(path)
    return generate_synthetic(cfg.synth_config())


def _model_for(cfg: ExperimentConfig, corpus: EmbeddingCorpus) -> ModelParams:
    hidden = cfg["model.hidden_dim"] or None
    return ModelParams.init(
        d_raw=corpus.dim, d_feat=cfg["model.feat_dim"], hidden=hidden, seed=cfg["model.seed"]
    )


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(str(cfg["output.dir"]))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    corpus = generate_synthetic(cfg.synth_config())
    path = Path(args.corpus or str(cfg["corpus.path"]) or _out_dir(cfg) / "corpus.txt")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, path)
    manifest = {
        "config_hash": cfg.config_hash(),
        "dim": corpus.dim,
        "num_items": len(corpus),
        "seed": cfg["corpus.seed"],
    }
    Path(f"{path}.manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n"
    )
    print(f"wrote {len(corpus)} items to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg)
    train_corpus, _ = split_corpus(corpus, cfg["split.train_fraction"], cfg["split.seed"])
    sampler = BatchSampler(train_corpus, cfg.sampler_config())
    schedule = cfg.schedule()
    out = _out_dir(cfg)
    every = args.checkpoint_every

    def snapshot(stage: int, epoch: int, params: ModelParams) -> None:
        if every > 0 and epoch % every == 0:
            save_checkpoint(params, out / f"stage{stage}_epoch{epoch:03d}.ckpt")

    curve = []
    if args.stage in ("1", "all"):
        params = _model_for(cfg, corpus)
        params, c1 = stage1_train(
            params, train_corpus, schedule, sampler,
            epoch_callback=lambda e, p: snapshot(1, e, p),
        )
        curve.extend(c1)
        save_checkpoint(params, out / "stage1.ckpt")
        print(f"stage 1 done: {len(c1)} epochs, final loss {c1[-1].loss:.4f}")
    else:
        ckpt = args.checkpoint or out / "stage1.ckpt"
        params = load_checkpoint(ckpt)

    if args.stage in ("2", "all"):
        params, c2 = stage2_train(
            params, train_corpus, schedule, sampler, cfg.fusion_config(),
            epoch_callback=lambda e, p: snapshot(2, e, p),
        )
        for row in c2:
            curve.append(row)
        save_checkpoint(params, out / "stage2.ckpt")
        print(f"stage 2 done: {len(c2)} epochs, final loss {c2[-1].loss:.4f}")

    # Global epoch numbering across stages for the log.
    renumbered = [
        type(row)(epoch=i + 1, stage=row.stage, lr=row.lr, loss=row.loss, accuracy=row.accuracy)
        for i, row in enumerate(curve)
    ]
    write_train_log(out / "train_log.csv", renumbered)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg)
    _, test_corpus = split_corpus(corpus, cfg["split.train_fraction"], cfg["split.seed"])
    params = load_checkpoint(args.checkpoint)
    methods = (
        [m.strip() for m in args.methods.split(",") if m.strip()]
        if args.methods
        else cfg.methods()
    )
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    eval_cfg = EvalConfig(shortlist_size=cfg["eval.shortlist_size"], fusion=cfg.fusion_config())

    rows = [(m, evaluate(params, test_corpus, m, eval_cfg)) for m in methods]
    sys.stdout.write(metrics_table(rows))
    if args.report:
        write_metrics_report(args.report, rows)
        print(f"report written to {args.report}")
    if args.dump_graph:
        _write_graph_dump(params, test_corpus, eval_cfg, Path(args.dump_graph))
    return 0


def _write_graph_dump(
    params: ModelParams, test_corpus: EmbeddingCorpus, cfg: EvalConfig, path: Path
) -> None:
    """Dump the fusion graph of the first test probe over its shortlist."""
    items = sorted(test_corpus.items, key=lambda it: it.item_id)
    feats, _ = embed_forward(params.embed, np.stack([it.raw for it in items]))
    ids = np.array([it.item_id for it in items])
    probe_feat, gal_feats, gal_ids = feats[0], feats[1:], ids[1:]
    dists = np.linalg.norm(gal_feats - probe_feat, axis=1)
    order = np.lexsort((gal_ids, dists))[: cfg.shortlist_size]
    short = gal_feats[order]
    scores, graph = sggnn_forward_features(
        params, probe_feat, short, cfg.fusion,
        probe_id=int(ids[0]), gallery_ids=[int(i) for i in gal_ids[order]],
    )
    d, _ = bn_forward(params.bn, (probe_feat - short) ** 2, train=False)
    base_scores = sigmoid(d @ params.clf_pg.w + params.clf_pg.b)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_graph(graph, base_scores, scores), encoding="utf-8", newline="\n")
    print(f"graph dump written to {path}")


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    corpus = _corpus_for(cfg)
    _, test_corpus = split_corpus(corpus, cfg["split.train_fraction"], cfg["split.seed"])
    grid = cfg.sweep_grid()

    checkpoints: dict[int, ModelParams] = {}
    for k in sorted({p.k for p in grid}):
        path = args.checkpoint.replace("{K}", str(k)) if "{K}" in args.checkpoint else args.checkpoint
        if Path(path).exists():
            checkpoints[k] = load_checkpoint(path)

    rows = sensitivity_sweep(
        checkpoints, test_corpus, grid,
        weight_mode=str(cfg["fusion.weight_mode"]), strict=False,
    )
    sys.stdout.write(sweep_table(rows))
    if args.report:
        write_sweep_report(args.report, rows)
        print(f"report written to {args.report}")
    if any(r.error is not None for r in rows):
        raise DataFormatError("sweep had rows with missing checkpoints (see table)")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
