"""``hssn`` command line: gen-synth, train, eval, embed, retrieve, experiment.

Exit codes: 0 success, 1 IO failure, 2 configuration/argument error,
3 data error, 4 numerical abort. Results go to stdout, diagnostics to
stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import config_to_dict, load_config
from .data import FoldSplit, ImageCache, complementary, kfold_split, load_manifest, outfit_ids
from .evaluate import rank_pairs, read_embeddings, retrieve, write_embeddings, write_results
from .exceptions import (
    ConfigurationError,
    DimensionError,
    HSSNError,
    InsufficientDataError,
    NumericalError,
    UnknownItemError,
    ValidationError,
)
from .model import embed, load_checkpoint
from .synthetic import generate_synthetic
from .train import TrainConfig, evaluate_fold, fold_pairset, run_experiment, train

log = logging.getLogger("hssn")

EXIT_IO, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _records(path):
    try:
        return load_manifest(path)
    except FileNotFoundError as exc:
        raise CliError(f"manifest not found: {path}", EXIT_DATA) from exc
    except OSError as exc:
        raise CliError(f"cannot read manifest {path}: {exc}", EXIT_DATA) from exc


def _fold(records, fold, k, seed) -> FoldSplit:
    ids = outfit_ids(records)
    if fold is None:
        return FoldSplit(-1, tuple(ids), tuple(ids))
    folds = kfold_split(ids, k, seed)
    if not 0 <= fold < len(folds):
        raise CliError(f"--fold must lie in [0, {len(folds) - 1}]", EXIT_CONFIG)
    return folds[fold]


def cmd_gen_synth(args):
    try:
        path = generate_synthetic(args.out, args.outfits, args.size, args.families, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    print(path)


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    out = Path(args.out)
    cfg = dataclasses.replace(cfg, checkpoint_dir=str(out), log_path=str(out / "metrics.jsonl"), **overrides)
    records = _records(args.manifest)
    fold = _fold(records, args.fold, cfg.k_folds, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    run = {"config": config_to_dict(cfg), "manifest": str(args.manifest), "fold": args.fold}
    (out / "run.json").write_text(json.dumps(run, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    result = train(cfg, records, fold)
    last = result.log[-1]
    print(result.checkpoint)
    print(json.dumps(last, sort_keys=True))


def cmd_eval(args):
    records = _records(args.manifest)
    model = load_checkpoint(args.ckpt)
    fold = _fold(records, args.fold, args.k, args.seed)
    ranks, score = evaluate_fold(model, records, fold)
    write_results(args.out, ranks)
    print(args.out)
    print(json.dumps({"map_normalized": score, "n_pairs": len(ranks)}))


def cmd_embed(args):
    records = _records(args.manifest)
    model = load_checkpoint(args.ckpt)
    cache = ImageCache(records, model.config.input_shape)
    rows = []
    for s in range(0, len(records), 64):
        chunk = records[s : s + 64]
        vecs = embed(model, cache.stack([r.item_id for r in chunk]))
        rows.extend((r.item_id, r.category, v) for r, v in zip(chunk, vecs))
    write_embeddings(args.out, rows)
    print(args.out)


def cmd_retrieve(args):
    vectors, categories = read_embeddings(args.embeddings)
    if args.query not in vectors:
        raise UnknownItemError(args.query)
    wanted = complementary(categories[args.query])
    candidates = [i for i, c in categories.items() if c == wanted]
    if not 1 <= args.k <= len(candidates):
        raise CliError(f"--k must lie in [1, {len(candidates)}]", EXIT_CONFIG)
    for item, dist in retrieve(args.query, candidates, vectors, args.k):
        print(json.dumps({"item_id": item, "distance": dist}))


def cmd_experiment(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    records = _records(args.manifest)
    table = run_experiment(cfg, records, args.seeds, args.k, jobs=args.jobs)
    if args.out:
        Path(args.out).write_text(json.dumps(table.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(table.format())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hssn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a procedural texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--outfits", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--families", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one model on one fold")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, help="train on the other folds; omit to train on every outfit")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank a fold's test pairs and write the results object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fold", type=int, help="omit to evaluate every outfit")
    p.add_argument("--seed", type=int, default=0, help="fold split seed (as used for training)")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed", help="write eval-mode embeddings for every manifest item")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("retrieve", help="top-k complementary items for a query")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("experiment", help="seeds x folds comparison of hybrid vs baseline")
    p.add_argument("--config")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s"
    )
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, DimensionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, InsufficientDataError, UnknownItemError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HSSNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
