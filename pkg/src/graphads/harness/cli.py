"""Command line front end.

Exit codes: 0 success, 1 usage or configuration problems, 2 malformed or
missing data, 3 numeric failures, 4 ablation ran but the expected arm
ordering did not hold.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from ..adgraph import degree_stats, serialize_graph
from ..errors import (BuildError, ConfigError, ContractError, DomainError,
                      GraphLookupError, NumericError, ParseError, ShapeError)
from ..evalkit import report_row, RESULTS_COLUMNS
from ..synthgen import export_dataset, gen_interactions, gen_world, \
    load_dataset
from .ablation import run_ablation
from .config import (ARMS, RunConfig, load_run_config, validate_config,
                     world_config)
from .data import build_train_graph
from .evaluate import evaluate, load_params_into, top_k_ads
from .model import init_state
from .train import CHECKPOINT_NAME, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_ORDERING = 4

# order matters: first matching class wins
_ERROR_EXITS = ((ConfigError, EXIT_USAGE),
                (ParseError, EXIT_DATA),
                (BuildError, EXIT_DATA),
                (DomainError, EXIT_DATA),
                (GraphLookupError, EXIT_DATA),
                (NumericError, EXIT_NUMERIC),
                (ContractError, EXIT_NUMERIC),
                (ShapeError, EXIT_NUMERIC),
                (FileNotFoundError, EXIT_DATA))


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we want 1
        raise _UsageError(message)


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = dataclasses.replace(config, out_dir=args.out)
    validate_config(config)
    return config


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    out = args.out if args.out else config.data_dir
    world = gen_world(world_config(config), config.seed)
    interactions = gen_interactions(world, config.n_users,
                                    config.n_sessions, config.seed)
    dataset = export_dataset(world, interactions, out, config.n_users,
                             config.n_sessions)
    print(f"wrote {out}: {len(dataset.ads)} ads, "
          f"{len(dataset.events)} query events, "
          f"{len(dataset.logs.sessions)} sessions")
    return EXIT_OK


def cmd_build_graph(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.data_dir)
    keys = frozenset(e.query_key for e in dataset.events)
    graph = build_train_graph(dataset, keys, config)
    out = args.out if args.out else config.out_dir
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "graph.tsv")
    serialize_graph(graph, path)
    stats = degree_stats(graph)
    nodes = " ".join(f"{k}={n}" for k, n in sorted(stats.node_counts.items()))
    edges = " ".join(f"{k}={n}" for k, n in sorted(stats.edge_counts.items()))
    print(f"wrote {path}: nodes {nodes}; edges {edges} "
          f"(total {stats.total_edges})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    result = train(config)
    print(f"arm {config.arm} seed {config.seed}: best epoch "
          f"{result.best_epoch}, val loss {result.best_val_loss:.6f}, "
          f"outputs in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load_config(args)
    ckpt = args.checkpoint or os.path.join(config.out_dir, CHECKPOINT_NAME)
    report = evaluate(config, checkpoint_path=ckpt)
    for name, value in zip(RESULTS_COLUMNS, report_row(report)):
        print(f"{name}\t{value}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(config.data_dir)
    state = init_state(config, dataset)
    ckpt = args.checkpoint or os.path.join(config.out_dir, CHECKPOINT_NAME)
    load_params_into(state, ckpt)
    for ad_id, score, text in top_k_ads(state, args.query, args.lang,
                                        k=args.k):
        print(f"{ad_id}\t{score:.6f}\t{text}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _load_config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    arms = tuple(args.arms.split(",")) if args.arms else ARMS
    out = args.out if args.out else config.out_dir
    result = run_ablation(config, out, arms=arms, seeds=seeds)
    for arm, seed, message in result.failures:
        print(f"FAILED {arm} seed {seed}: {message}", file=sys.stderr)
    for note in result.ordering_notes:
        print(note)
    print(f"ablation {'passed' if result.ordering_ok else 'FAILED'}: "
          f"results in {out}")
    return EXIT_OK if result.ordering_ok else EXIT_ORDERING


def _add_common(sub) -> None:
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--out", help="override the output directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="graphads",
                     description="cross-language ad retrieval experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(sub)
    sub.set_defaults(func=cmd_gen_data)

    sub = subs.add_parser("build-graph",
                          help="build and save the interaction graph")
    _add_common(sub)
    sub.set_defaults(func=cmd_build_graph)

    sub = subs.add_parser("train", help="train one arm")
    _add_common(sub)
    sub.set_defaults(func=cmd_train)

    sub = subs.add_parser("eval",
                          help="evaluate a trained model on the test split")
    _add_common(sub)
    sub.add_argument("--checkpoint", help="model checkpoint path")
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("retrieve", help="top-k ads for a query string")
    _add_common(sub)
    sub.add_argument("--checkpoint", help="model checkpoint path")
    sub.add_argument("--query", required=True, help="query text")
    sub.add_argument("--lang", required=True, help="query language")
    sub.add_argument("--k", type=int, default=5, help="number of ads")
    sub.set_defaults(func=cmd_retrieve)

    sub = subs.add_parser("ablate", help="run the arm-by-seed study")
    _add_common(sub)
    sub.add_argument("--seeds", default="42,43,44",
                     help="comma-separated seeds")
    sub.add_argument("--arms", help="comma-separated arm names")
    sub.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except tuple(cls for cls, _ in _ERROR_EXITS) as err:
        for cls, code in _ERROR_EXITS:
            if isinstance(err, cls):
                print(f"error: {err}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
